//! Wall-clock scaling of the selective scan against naive self-attention.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tmamba_core::attention::self_attention;
use tmamba_core::numcore::Tensor;
use tmamba_core::ssm::SsmParams;

use crate::Error;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub len: usize,
    /// Median seconds.
    pub scan: f64,
    pub attention: f64,
    /// Time relative to the previous row, when there is one.
    pub scan_ratio: Option<f64>,
    pub attention_ratio: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub channels: usize,
    pub state: usize,
    pub runs: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            state: 16,
            runs: 5,
            seed: 0,
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Seconds per call of one sample: the call repeats until at least
/// `MIN_SAMPLE` has passed so that millisecond-scale calls are not dominated
/// by timer and scheduler noise.
fn sample<F: FnMut() -> Result<Tensor, Error>>(f: &mut F) -> Result<f64, Error> {
    const MIN_SAMPLE: f64 = 0.05;
    let start = Instant::now();
    let mut calls = 0u32;
    loop {
        std::hint::black_box(f()?);
        calls += 1;
        let secs = start.elapsed().as_secs_f64();
        if secs >= MIN_SAMPLE {
            return Ok(secs / f64::from(calls));
        }
    }
}

/// Median seconds per call of each operator. Samples are taken round-robin
/// over the operators, after one warm-up call each, so slow drift of the
/// machine affects all of them alike.
fn time_all<F: FnMut() -> Result<Tensor, Error>>(runs: usize, ops: &mut [F]) -> Result<Vec<f64>, Error> {
    for f in ops.iter_mut() {
        if !f()?.is_finite() {
            return Err(Error::Data("benchmark produced non-finite values".into()));
        }
    }
    let mut t = vec![Vec::with_capacity(runs); ops.len()];
    for _ in 0..runs {
        for (f, ts) in ops.iter_mut().zip(&mut t) {
            ts.push(sample(f)?);
        }
    }
    Ok(t.into_iter().map(median).collect())
}

/// Times both operators at every length of an ascending list.
pub fn bench(lengths: &[usize], cfg: &BenchConfig) -> Result<Vec<BenchRow>, Error> {
    if lengths.is_empty() || lengths.contains(&0) || lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Usage("lengths must be positive and strictly ascending".into()));
    }
    if cfg.runs == 0 || cfg.channels == 0 || cfg.state == 0 {
        return Err(Error::Usage("runs, channels and state must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let c = cfg.channels;
    let ssm = SsmParams::init(c, cfg.state, &mut rng).freeze();
    let scale = 1.0 / (c as f64).sqrt();
    let w: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[c, c], scale, &mut rng)).collect();
    let inputs: Vec<Tensor> = lengths.iter().map(|&len| Tensor::randn(&[len, c], 1.0, &mut rng)).collect();
    let (ssm, w) = (&ssm, &w);
    // all scans first, so the large attention buffers do not disturb them
    let mut ops: Vec<_> = inputs.iter().map(|x| move || Ok(ssm.scan(x)?)).collect();
    let scans = time_all(cfg.runs, &mut ops)?;
    let mut ops: Vec<_> = inputs
        .iter()
        .map(|x| move || Ok(self_attention(x, &w[0], &w[1], &w[2])?))
        .collect();
    let attentions = time_all(cfg.runs, &mut ops)?;
    let mut rows: Vec<BenchRow> = Vec::with_capacity(lengths.len());
    for (i, &len) in lengths.iter().enumerate() {
        let (scan, attention) = (scans[i], attentions[i]);
        let prev = rows.last();
        rows.push(BenchRow {
            len,
            scan,
            attention,
            scan_ratio: prev.map(|p| scan / p.scan),
            attention_ratio: prev.map(|p| attention / p.attention),
        });
    }
    Ok(rows)
}

pub fn format_table(rows: &[BenchRow]) -> String {
    let ratio = |r: Option<f64>| r.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
    let mut s = String::from("      L     scan (ms)  attention (ms)  scan ratio  attention ratio\n");
    for r in rows {
        s.push_str(&format!(
            "{:>7}  {:>12.4}  {:>14.4}  {:>10}  {:>15}\n",
            r.len,
            r.scan * 1e3,
            r.attention * 1e3,
            ratio(r.scan_ratio),
            ratio(r.attention_ratio)
        ));
    }
    s
}
