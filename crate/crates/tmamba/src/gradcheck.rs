//! Finite-difference checks of every module boundary at tiny sizes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tmamba_core::freq::{bandpass_mask, frequency_branch_graph, BandKind, DEFAULT_S_HIGH};
use tmamba_core::net::{segmentation_loss, Model, NetConfig};
use tmamba_core::numcore::{grad_check, Bound, Graph, GradCheckReport, ParamStore, Tensor, Var};
use tmamba_core::posenc::add_positional;
use tmamba_core::ssm::{selective_scan_graph, SsmParams, SsmVars};
use tmamba_core::tim::{TimBlock, TimConfig};

use crate::Error;

pub const PASS_THRESHOLD: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckRow {
    pub module: &'static str,
    pub max_rel_err: f64,
    pub evaluations: usize,
    pub passed: bool,
}

fn row(module: &'static str, rep: GradCheckReport) -> CheckRow {
    CheckRow {
        module,
        max_rel_err: rep.max_rel_err,
        evaluations: rep.evaluations,
        passed: rep.max_rel_err < PASS_THRESHOLD,
    }
}

/// `sum(y * probe)`, a generic linear read-out.
fn probe_sum(g: &mut Graph, y: Var, probe: &Tensor) -> tmamba_core::Result<Var> {
    let p = g.constant(probe.clone());
    let s = g.mul(y, p)?;
    g.sum(s)
}

pub fn check_ssm(eps: f64, seed: u64) -> Result<CheckRow, Error> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let p = SsmParams::init(3, 4, &mut r);
    let x = Tensor::randn(&[1, 8, 3], 1.0, &mut r);
    let probe = Tensor::randn(&[1, 8, 3], 1.0, &mut r);
    let mut params: Vec<Tensor> = p.tensors().into_iter().cloned().collect();
    params.push(x);
    let rep = grad_check(&params, eps, |g, v| {
        let vars = SsmVars {
            a_log: v[0],
            w_delta: v[1],
            delta_bias: v[2],
            w_b: v[3],
            w_c: v[4],
        };
        let y = selective_scan_graph(g, v[5], &vars)?;
        probe_sum(g, y, &probe)
    })?;
    Ok(row("ssm", rep))
}

pub fn check_freq(eps: f64, seed: u64) -> Result<CheckRow, Error> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (l, c) = (12usize, 3);
    let n = l.next_power_of_two();
    let mask = bandpass_mask(n, BandKind::Band, 0.2, DEFAULT_S_HIGH)?;
    let x = Tensor::randn(&[1, l, c], 1.0, &mut r);
    let zp = Tensor::randn(&[1, l, c], 1.0, &mut r);
    let w = Tensor::randn(&[c, n / 2 + 1, 2], 1.0, &mut r);
    let probe = Tensor::randn(&[1, l, c], 1.0, &mut r);
    let rep = grad_check(&[x, zp, w], eps, |g, v| {
        let y = frequency_branch_graph(g, v[0], v[1], v[2], &mask)?;
        probe_sum(g, y, &probe)
    })?;
    Ok(row("freq", rep))
}

pub fn check_posenc(eps: f64, seed: u64) -> Result<CheckRow, Error> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (l, c) = (6, 4);
    let table = Tensor::randn(&[l, c], 1.0, &mut r);
    let x = Tensor::randn(&[2, l, c], 1.0, &mut r);
    let mix = Tensor::randn(&[c, c], 1.0, &mut r);
    let probe = Tensor::randn(&[2, l, c], 1.0, &mut r);
    let rep = grad_check(&[table, x], eps, |g, v| {
        let pre = add_positional(g, v[1], v[0])?;
        let m = g.constant(mix.clone());
        let h = g.matmul(pre, m)?;
        let h = g.silu(h)?;
        let post = add_positional(g, h, v[0])?;
        probe_sum(g, post, &probe)
    })?;
    Ok(row("posenc", rep))
}

pub fn check_tim(eps: f64, seed: u64) -> Result<CheckRow, Error> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = TimConfig::new(4, 16);
    cfg.pool_dim = 8;
    cfg.state = 4;
    let mut store = ParamStore::new();
    let block = TimBlock::new(&mut store, "tim", cfg, &mut r)?;
    let mut params = store.values().to_vec();
    for (name, t) in store.iter() {
        if name.contains("gate.w_logits") {
            let id = store.find(name).expect("listed name");
            params[id.index()] = t.map(|v| v * 10.0);
        }
    }
    let input = [1, 4, 4, 4];
    params.push(Tensor::randn(&input, 1.0, &mut r));
    let probe = Tensor::randn(&input, 1.0, &mut r);
    let rep = grad_check(&params, eps, |g, v| {
        let bound = Bound::from_vars(v[..v.len() - 1].to_vec());
        let o = block.forward(g, &bound, v[v.len() - 1])?;
        probe_sum(g, o.out, &probe)
    })?;
    Ok(row("tim", rep))
}

/// Full model on random images and labels of the given size.
pub fn check_net(cfg: NetConfig, eps: f64, seed: u64) -> Result<CheckRow, Error> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::build(cfg.clone(), &mut r)?;
    let mut shape = vec![1, cfg.in_channels];
    shape.extend(&cfg.input_size);
    let x = Tensor::randn(&shape, 1.0, &mut r);
    let n: usize = cfg.input_size.iter().product();
    let labels: Vec<usize> = (0..n).map(|i| usize::from(x.data()[i] > 0.0)).collect();
    let rep = grad_check(model.params.values(), eps, |g, v| {
        let p = Bound::from_vars(v.to_vec());
        let xv = g.constant(x.clone());
        let o = model.forward(g, &p, xv)?;
        Ok(segmentation_loss(g, o.logits, &labels, cfg.dice_weight, cfg.ce_weight)?.total)
    })?;
    Ok(row("net", rep))
}

/// Every module check; the network uses the tiny widths at 8x8.
pub fn check_all(eps: f64, seed: u64) -> Result<Vec<CheckRow>, Error> {
    Ok(vec![
        check_ssm(eps, seed)?,
        check_freq(eps, seed)?,
        check_posenc(eps, seed)?,
        check_tim(eps, seed)?,
        check_net(NetConfig::tiny(2, &[8, 8]), eps, seed)?,
    ])
}

pub fn format_table(rows: &[CheckRow]) -> String {
    let mut s = String::from("module   max rel err   evaluations  result\n");
    for r in rows {
        s.push_str(&format!(
            "{:<7}  {:>12.3e}  {:>11}  {}\n",
            r.module,
            r.max_rel_err,
            r.evaluations,
            if r.passed { "ok" } else { "FAIL" }
        ));
    }
    s
}
