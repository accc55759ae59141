//! The Tim block: token mixing over a flattened feature map with forward
//! and backward selective scans plus a spectral branch, fused by a
//! data-dependent softmax gate.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::freq::{
    bandpass_mask, frequency_branch_graph, BandKind, FreqBranchParams, DEFAULT_S_HIGH,
    DEFAULT_S_LOW,
};
use crate::numcore::{Bound, Graph, ParamId, ParamStore, Tensor, Var};
use crate::posenc::{add_positional, sinusoidal_init, PosMode};
use crate::ssm::{bidirectional_scan_graph, SsmParams, SsmVars, DEFAULT_STATE};
use crate::{Error, Result};

pub const DEFAULT_POOL_DIM: usize = 64;
pub const DEFAULT_CONV_KERNEL: usize = 4;
const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct TimConfig {
    pub channels: usize,
    /// Flattened spatial length the block is built for.
    pub len: usize,
    pub state: usize,
    pub band: BandKind,
    pub s_low: f64,
    pub s_high: f64,
    /// Width of the pooled gate summary.
    pub pool_dim: usize,
    pub conv_kernel: usize,
    pub use_freq: bool,
    pub use_gate: bool,
    pub use_residual: bool,
    pub pos_mode: PosMode,
}

impl TimConfig {
    pub fn new(channels: usize, len: usize) -> Self {
        Self {
            channels,
            len,
            state: DEFAULT_STATE,
            band: BandKind::Low,
            s_low: DEFAULT_S_LOW,
            s_high: DEFAULT_S_HIGH,
            pool_dim: DEFAULT_POOL_DIM,
            conv_kernel: DEFAULT_CONV_KERNEL,
            use_freq: true,
            use_gate: true,
            use_residual: true,
            pos_mode: PosMode::Shared,
        }
    }

    /// Number of fused streams.
    pub fn streams(&self) -> usize {
        if self.use_freq {
            3
        } else {
            2
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Err(Error::invalid("tim_config", reason));
        if self.channels == 0 || self.len == 0 || self.state == 0 {
            return bad("channels, length and state size must be positive");
        }
        if self.pool_dim == 0 || self.conv_kernel == 0 {
            return bad("pool dimension and conv kernel must be positive");
        }
        if self.pos_mode != PosMode::None && self.channels % 2 != 0 {
            return bad("positional tables need an even channel count");
        }
        if !(self.s_low > 0.0 && self.s_low <= self.s_high && self.s_high < 1.0) {
            return bad("thresholds must satisfy 0 < s_low <= s_high < 1");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SsmIds {
    pub a_log: ParamId,
    pub w_delta: ParamId,
    pub delta_bias: ParamId,
    pub w_b: ParamId,
    pub w_c: ParamId,
}

impl SsmIds {
    fn register(store: &mut ParamStore, prefix: &str, p: SsmParams) -> Self {
        Self {
            a_log: store.add(&format!("{prefix}.a_log"), p.a_log),
            w_delta: store.add(&format!("{prefix}.w_delta"), p.w_delta),
            delta_bias: store.add(&format!("{prefix}.delta_bias"), p.delta_bias),
            w_b: store.add(&format!("{prefix}.w_b"), p.w_b),
            w_c: store.add(&format!("{prefix}.w_c"), p.w_c),
        }
    }

    pub fn vars(&self, b: &Bound) -> SsmVars {
        SsmVars {
            a_log: b.var(self.a_log),
            w_delta: b.var(self.w_delta),
            delta_bias: b.var(self.delta_bias),
            w_b: b.var(self.w_b),
            w_c: b.var(self.w_c),
        }
    }
}

/// Pooled-summary MLP producing one logit per stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GateIds {
    pub w_hidden: ParamId,
    pub b_hidden: ParamId,
    pub w_logits: ParamId,
    pub b_logits: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    pub w_hidden: Var,
    pub b_hidden: Var,
    pub w_logits: Var,
    pub b_logits: Var,
}

impl GateIds {
    pub fn vars(&self, b: &Bound) -> GateVars {
        GateVars {
            w_hidden: b.var(self.w_hidden),
            b_hidden: b.var(self.b_hidden),
            w_logits: b.var(self.w_logits),
            b_logits: b.var(self.b_logits),
        }
    }
}

/// Stream proportions `(B, k)` from the tokens `x: (B, L, C)`.
pub fn gate_weights(g: &mut Graph, x: Var, gate: &GateVars) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0], s[1..].iter().product()])?;
    let p = g.shape(gate.w_hidden)[0];
    let pooled = g.adaptive_mean_pool(flat, p)?;
    let h = g.matmul(pooled, gate.w_hidden)?;
    let h = g.add(h, gate.b_hidden)?;
    let h = g.silu(h)?;
    let logits = g.matmul(h, gate.w_logits)?;
    let logits = g.add(logits, gate.b_logits)?;
    g.softmax(logits, 1)
}

/// `sum_i weights[:, i] * streams[i]` for streams `(B, L, C)`.
pub fn weighted_sum(g: &mut Graph, streams: &[Var], weights: Var) -> Result<Var> {
    let ws = g.shape(weights).to_vec();
    if ws.len() != 2 || ws[1] != streams.len() || streams.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "weighted_sum",
            expected: vec![ws.first().copied().unwrap_or(0), streams.len()],
            got: ws,
        });
    }
    let mut acc: Option<Var> = None;
    for (i, &f) in streams.iter().enumerate() {
        let w = g.slice(weights, 1, i, 1)?;
        let w = g.reshape(w, &[ws[0], 1, 1])?;
        let term = g.mul(f, w)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.unwrap())
}

/// Fuses the streams with gate proportions, projects, and adds `x` back.
/// Returns `(output, proportions)`.
pub fn gate_select(
    g: &mut Graph,
    streams: &[Var],
    x: Var,
    gate: &GateVars,
    w_out: Var,
    b_out: Var,
) -> Result<(Var, Var)> {
    for &f in streams {
        if g.shape(f) != g.shape(x) {
            return Err(Error::ShapeMismatch {
                op: "gate_select",
                expected: g.shape(x).to_vec(),
                got: g.shape(f).to_vec(),
            });
        }
    }
    let weights = gate_weights(g, x, gate)?;
    let fused = weighted_sum(g, streams, weights)?;
    let proj = g.matmul(fused, w_out)?;
    let proj = g.add(proj, b_out)?;
    Ok((g.add(proj, x)?, weights))
}

/// Graph outputs of one block application.
#[derive(Clone, Copy, Debug)]
pub struct TimOutput {
    pub out: Var,
    /// Stream proportions `(B, k)` when the gate is enabled.
    pub gate: Option<Var>,
}

/// Parameter handles of one Tim block inside a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct TimBlock {
    pub cfg: TimConfig,
    pub prefix: String,
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
    pub w_x: ParamId,
    pub w_z: ParamId,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub ssm_fwd: SsmIds,
    pub ssm_bwd: SsmIds,
    pub w_freq: Option<ParamId>,
    pub gate: Option<GateIds>,
    pub w_out: ParamId,
    pub b_out: ParamId,
    pub pe_pre: Option<ParamId>,
    pub pe_post: Option<ParamId>,
}

impl TimBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: TimConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let lin = 1.0 / libm::sqrt(c as f64);
        let mut add = |name: &str, t: Tensor| store.add(&format!("{prefix}.{name}"), t);
        let norm_gamma = add("norm.gamma", Tensor::full(&[c], 1.0));
        let norm_beta = add("norm.beta", Tensor::zeros(&[c]));
        let w_x = add("w_x", Tensor::randn(&[c, c], lin, rng));
        let w_z = add("w_z", Tensor::randn(&[c, c], lin, rng));
        let kb = 1.0 / libm::sqrt(cfg.conv_kernel as f64);
        let conv_w = add("conv.w", Tensor::uniform(&[c, cfg.conv_kernel], -kb, kb, rng));
        let conv_b = add("conv.b", Tensor::zeros(&[c]));
        let fwd = SsmParams::init(c, cfg.state, rng);
        let bwd = SsmParams::init(c, cfg.state, rng);
        let w_freq = if cfg.use_freq {
            let p = FreqBranchParams::new(c, cfg.len, cfg.band, cfg.s_low, cfg.s_high)?;
            Some(add("freq.w", p.w_half))
        } else {
            None
        };
        let gate = if cfg.use_gate {
            let p = cfg.pool_dim;
            let k = cfg.streams();
            let hs = 1.0 / libm::sqrt(p as f64);
            Some(GateIds {
                w_hidden: add("gate.w_hidden", Tensor::randn(&[p, p], hs, rng)),
                b_hidden: add("gate.b_hidden", Tensor::zeros(&[p])),
                w_logits: add("gate.w_logits", Tensor::randn(&[p, k], 0.1 * hs, rng)),
                b_logits: add("gate.b_logits", Tensor::zeros(&[k])),
            })
        } else {
            None
        };
        let w_out = add("w_out", Tensor::randn(&[c, c], lin, rng));
        let b_out = add("b_out", Tensor::zeros(&[c]));
        let (pe_pre, pe_post) = match cfg.pos_mode {
            PosMode::None => (None, None),
            PosMode::Pre => (Some(add("pe", sinusoidal_init(cfg.len, c)?)), None),
            PosMode::Post => (None, Some(add("pe", sinusoidal_init(cfg.len, c)?))),
            PosMode::Shared => {
                let id = add("pe", sinusoidal_init(cfg.len, c)?);
                (Some(id), Some(id))
            }
            PosMode::Unshared => (
                Some(add("pe_pre", sinusoidal_init(cfg.len, c)?)),
                Some(add("pe_post", sinusoidal_init(cfg.len, c)?)),
            ),
        };
        let ssm_fwd = SsmIds::register(store, &format!("{prefix}.ssm_fwd"), fwd);
        let ssm_bwd = SsmIds::register(store, &format!("{prefix}.ssm_bwd"), bwd);
        Ok(Self {
            cfg,
            prefix: prefix.into(),
            norm_gamma,
            norm_beta,
            w_x,
            w_z,
            conv_w,
            conv_b,
            ssm_fwd,
            ssm_bwd,
            w_freq,
            gate,
            w_out,
            b_out,
            pe_pre,
            pe_post,
        })
    }

    /// Distinct positional tables owned by the block.
    pub fn pe_tables(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.pe_pre.iter().chain(&self.pe_post).copied().collect();
        v.dedup();
        v
    }

    /// Applies the block to a feature map `(B, C, *spatial)`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, input: Var) -> Result<TimOutput> {
        let cfg = &self.cfg;
        let shape = g.shape(input).to_vec();
        if shape.len() < 3 || shape[1] != cfg.channels {
            return Err(Error::InvalidShape {
                op: "tim_forward",
                shape,
                reason: "expected (B, C, *spatial) with the configured channels",
            });
        }
        let (b, c) = (shape[0], shape[1]);
        let l: usize = shape[2..].iter().product();
        if l != cfg.len {
            return Err(Error::ShapeMismatch {
                op: "tim_forward",
                expected: vec![cfg.len],
                got: vec![l],
            });
        }
        let flat = g.reshape(input, &[b, c, l])?;
        let tokens = g.permute(flat, &[0, 2, 1])?;
        let x = match self.pe_pre {
            Some(id) => add_positional(g, tokens, p.var(id))?,
            None => tokens,
        };

        let normed = g.layer_norm(x, NORM_EPS)?;
        let normed = g.mul(normed, p.var(self.norm_gamma))?;
        let normed = g.add(normed, p.var(self.norm_beta))?;
        let xs = g.matmul(normed, p.var(self.w_x))?;
        let zs = g.matmul(normed, p.var(self.w_z))?;
        let zp = g.silu(zs)?;

        let conv = g.causal_conv1d(xs, p.var(self.conv_w))?;
        let conv = g.add(conv, p.var(self.conv_b))?;
        let conv = g.silu(conv)?;
        let (yf, yb) = bidirectional_scan_graph(
            g,
            conv,
            &self.ssm_fwd.vars(p),
            &self.ssm_bwd.vars(p),
        )?;
        let mut streams = vec![g.mul(yf, zp)?, g.mul(yb, zp)?];
        if let Some(w) = self.w_freq {
            let n = l.next_power_of_two();
            let mask = bandpass_mask(n, cfg.band, cfg.s_low, cfg.s_high)?;
            streams.push(frequency_branch_graph(g, xs, zp, p.var(w), &mask)?);
        }

        // without the gate every stream gets an equal share
        let weights = match self.gate {
            Some(ids) => gate_weights(g, x, &ids.vars(p))?,
            None => {
                let k = streams.len();
                g.constant(Tensor::full(&[b, k], 1.0 / k as f64))
            }
        };
        let fused = weighted_sum(g, &streams, weights)?;
        let proj = g.matmul(fused, p.var(self.w_out))?;
        let mut y = g.add(proj, p.var(self.b_out))?;
        if cfg.use_residual {
            y = g.add(y, x)?;
        }
        if let Some(id) = self.pe_post {
            y = add_positional(g, y, p.var(id))?;
        }
        let back = g.permute(y, &[0, 2, 1])?;
        let out = g.reshape(back, &shape)?;
        Ok(TimOutput {
            out,
            gate: self.gate.map(|_| weights),
        })
    }

    /// Forward pass on concrete values; returns the output and the gate
    /// proportions when the gate is enabled.
    pub fn apply(&self, store: &ParamStore, input: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        let mut g = Graph::new();
        let bound = store.bind(&mut g, false);
        let x = g.constant(input.clone());
        let o = self.forward(&mut g, &bound, x)?;
        Ok((g.value(o.out).clone(), o.gate.map(|w| g.value(w).clone())))
    }
}
