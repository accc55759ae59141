//! Spectral branch: learnable conjugate-symmetric weighting of the token
//! spectrum, a fixed bandpass support, and gating by the per-channel
//! maximum of the activated gate stream.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::numcore::{half_len, next_pow2, Complex, FftPlan, Graph, Tensor, Var};
use crate::{Error, Result};

pub const DEFAULT_S_LOW: f64 = 0.1;
pub const DEFAULT_S_HIGH: f64 = 0.9;

/// Largest imaginary part tolerated after the inverse transform.
pub const IMAG_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BandKind {
    Low,
    Band,
    High,
}

impl BandKind {
    /// Band used at feature scale `scale` (0-based, finest first).
    pub fn for_scale(scale: usize) -> Self {
        match scale {
            0 => BandKind::Low,
            1 => BandKind::Band,
            _ => BandKind::High,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BandKind::Low => "low",
            BandKind::Band => "band",
            BandKind::High => "high",
        }
    }
}

impl fmt::Display for BandKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BandKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(BandKind::Low),
            "band" => Ok(BandKind::Band),
            "high" => Ok(BandKind::High),
            other => Err(Error::InvalidBand(other.to_string())),
        }
    }
}

/// Position of bin `k` of an `n`-point spectrum on `[0, 1]`, with 1 at Nyquist.
pub fn normalized_frequency(k: usize, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let k = k % n;
    k.min(n - k) as f64 / (n as f64 / 2.0)
}

fn check_thresholds(s_low: f64, s_high: f64) -> Result<()> {
    let ok = s_low > 0.0 && s_high < 1.0 && s_low <= s_high;
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(
            "bandpass_mask",
            "thresholds must satisfy 0 < s_low <= s_high < 1",
        ))
    }
}

/// Binary support over the bins of a padded spectrum.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BandMask {
    keep: Vec<bool>,
}

impl BandMask {
    pub fn all_pass(n: usize) -> Self {
        Self {
            keep: vec![true; n],
        }
    }

    /// Arbitrary support; asymmetric supports make real inputs complex.
    pub fn from_bins(keep: Vec<bool>) -> Self {
        Self { keep }
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn keeps(&self, k: usize) -> bool {
        self.keep[k]
    }

    /// Indices of the kept bins.
    pub fn kept(&self) -> Vec<usize> {
        (0..self.keep.len()).filter(|&k| self.keep[k]).collect()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.keep.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn apply(&self, spectrum: &mut [Complex]) {
        for (z, &k) in spectrum.iter_mut().zip(&self.keep) {
            if !k {
                *z = Complex::default();
            }
        }
    }
}

pub fn bandpass_mask(n_bins: usize, band: BandKind, s_low: f64, s_high: f64) -> Result<BandMask> {
    if !n_bins.is_power_of_two() {
        return Err(Error::NotPowerOfTwo(n_bins));
    }
    check_thresholds(s_low, s_high)?;
    let keep = (0..n_bins)
        .map(|k| {
            let nu = normalized_frequency(k, n_bins);
            match band {
                BandKind::Low => nu < s_low,
                BandKind::Band => s_low < nu && nu < s_high,
                BandKind::High => nu > s_high,
            }
        })
        .collect();
    Ok(BandMask { keep })
}

/// Learnable spectral weights plus the fixed band selection of one branch.
///
/// `w_half` holds the non-negative-frequency half `(C, n/2 + 1, 2)`; the full
/// spectrum is its conjugate-symmetric mirror.
#[derive(Clone, Debug, PartialEq)]
pub struct FreqBranchParams {
    pub w_half: Tensor,
    pub band: BandKind,
    pub s_low: f64,
    pub s_high: f64,
}

impl FreqBranchParams {
    /// Identity weighting for sequences of length `len`.
    pub fn new(channels: usize, len: usize, band: BandKind, s_low: f64, s_high: f64) -> Result<Self> {
        check_thresholds(s_low, s_high)?;
        if channels == 0 || len == 0 {
            return Err(Error::invalid("freq_branch", "channels and length must be positive"));
        }
        let n = next_pow2(len);
        let h = half_len(n);
        let w_half = Tensor::from_fn(&[channels, h, 2], |i| if i % 2 == 0 { 1.0 } else { 0.0 });
        Ok(Self {
            w_half,
            band,
            s_low,
            s_high,
        })
    }

    pub fn channels(&self) -> usize {
        self.w_half.shape()[0]
    }

    pub fn padded_len(&self) -> usize {
        let h = self.w_half.shape()[1];
        if h == 1 {
            1
        } else {
            2 * (h - 1)
        }
    }

    pub fn mask(&self) -> Result<BandMask> {
        bandpass_mask(self.padded_len(), self.band, self.s_low, self.s_high)
    }

    /// Full conjugate-symmetric spectrum of channel `c`.
    pub fn full_weights(&self, c: usize) -> Vec<Complex> {
        let n = self.padded_len();
        let h = self.w_half.shape()[1];
        let src = &self.w_half.data()[c * h * 2..][..h * 2];
        let mut w = vec![Complex::default(); n];
        for k in 0..h {
            let edge = k == 0 || 2 * k == n;
            let z = Complex::new(src[2 * k], if edge { 0.0 } else { src[2 * k + 1] });
            w[k] = z;
            if !edge {
                w[n - k] = z.conj();
            }
        }
        w
    }
}

/// Real-to-complex layout `(B, L, C)` → `(B, C, n, 2)` with zero padding.
fn to_spectrum_layout(g: &mut Graph, x: Var, n: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, l, c) = (s[0], s[1], s[2]);
    let xt = g.permute(x, &[0, 2, 1])?;
    let xp = if n > l { g.pad(xt, 2, 0, n - l)? } else { xt };
    let col = g.reshape(xp, &[b, c, n, 1])?;
    g.pad(col, 3, 0, 1)
}

/// `IFFT(mask · W_f · FFT(x))` for `x: (B, L, C)`, truncated back to `L`.
pub fn spectral_filter_graph(g: &mut Graph, x: Var, w_half: Var, mask: &BandMask) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::InvalidShape {
            op: "freq_branch",
            shape: s,
            reason: "expected (B, L, C)",
        });
    }
    let (b, l, c) = (s[0], s[1], s[2]);
    let n = mask.len();
    if n < l {
        return Err(Error::invalid("freq_branch", "mask shorter than the sequence"));
    }
    let z = to_spectrum_layout(g, x, n)?;
    let spec = g.fft(z, false)?;
    let w = g.hermitian_expand(w_half, n)?;
    let weighted = g.complex_mul(spec, w)?;
    let m = g.constant(Tensor::new(&[n, 1], mask.as_f64())?);
    let masked = g.mul(weighted, m)?;
    let back = g.fft(masked, true)?;
    let residue = g
        .value(back)
        .data()
        .chunks_exact(2)
        .map(|p| libm::fabs(p[1]))
        .fold(0.0, f64::max);
    if residue >= IMAG_TOLERANCE {
        return Err(Error::ImaginaryResidue(residue));
    }
    let re = g.slice(back, 3, 0, 1)?;
    let re = g.slice(re, 2, 0, l)?;
    let re = g.reshape(re, &[b, c, l])?;
    g.permute(re, &[0, 2, 1])
}

/// Spectral filter gated by the per-channel maximum of `zp` over the sequence.
pub fn frequency_branch_graph(
    g: &mut Graph,
    x: Var,
    zp: Var,
    w_half: Var,
    mask: &BandMask,
) -> Result<Var> {
    if g.shape(x) != g.shape(zp) {
        return Err(Error::ShapeMismatch {
            op: "freq_branch",
            expected: g.shape(x).to_vec(),
            got: g.shape(zp).to_vec(),
        });
    }
    let f = spectral_filter_graph(g, x, w_half, mask)?;
    let gate = g.max_axis(zp, 1)?;
    g.mul(f, gate)
}

fn as_batch(op: &'static str, x: &Tensor) -> Result<Tensor> {
    match x.shape() {
        [l, c] => x.clone().reshape(&[1, *l, *c]),
        _ => Err(Error::InvalidShape {
            op,
            shape: x.shape().to_vec(),
            reason: "expected an (L, C) sequence",
        }),
    }
}

/// Frequency branch on one `(L, C)` sequence.
pub fn apply_frequency_branch(x: &Tensor, zp: &Tensor, params: &FreqBranchParams) -> Result<Tensor> {
    let xb = as_batch("apply_frequency_branch", x)?;
    let zb = as_batch("apply_frequency_branch", zp)?;
    if x.shape() != zp.shape() {
        return Err(Error::ShapeMismatch {
            op: "apply_frequency_branch",
            expected: x.shape().to_vec(),
            got: zp.shape().to_vec(),
        });
    }
    if x.shape()[1] != params.channels() || next_pow2(x.shape()[0]) != params.padded_len() {
        return Err(Error::ShapeMismatch {
            op: "apply_frequency_branch",
            expected: vec![params.padded_len(), params.channels()],
            got: x.shape().to_vec(),
        });
    }
    let mask = params.mask()?;
    let mut g = Graph::new();
    let xv = g.constant(xb);
    let zv = g.constant(zb);
    let w = g.constant(params.w_half.clone());
    let y = frequency_branch_graph(&mut g, xv, zv, w, &mask)?;
    g.value(y).clone().reshape(x.shape())
}

/// Spectra and reconstruction of one real signal through one branch channel.
#[derive(Clone, Debug, PartialEq)]
pub struct FilteredSignal {
    /// `|W_f · X|` before masking.
    pub pre_mask: Vec<f64>,
    /// `|mask · W_f · X|`.
    pub post_mask: Vec<f64>,
    pub reconstructed: Vec<f64>,
}

pub fn filter_signal(signal: &[f64], params: &FreqBranchParams, channel: usize) -> Result<FilteredSignal> {
    filter_signal_masked(signal, params, channel, &params.mask()?)
}

/// [`filter_signal`] with an explicit support in place of the branch band.
pub fn filter_signal_masked(
    signal: &[f64],
    params: &FreqBranchParams,
    channel: usize,
    mask: &BandMask,
) -> Result<FilteredSignal> {
    let n = params.padded_len();
    if signal.is_empty() || next_pow2(signal.len()) != n || channel >= params.channels() || mask.len() != n {
        return Err(Error::invalid("filter_signal", "signal does not fit the branch"));
    }
    let plan = FftPlan::new(n)?;
    let mut buf = vec![0.0; 2 * n];
    for (i, v) in signal.iter().enumerate() {
        buf[2 * i] = *v;
    }
    plan.process(&mut buf, false);
    let w = params.full_weights(channel);
    let mut spec: Vec<Complex> = buf
        .chunks_exact(2)
        .zip(&w)
        .map(|(p, w)| Complex::new(p[0], p[1]) * *w)
        .collect();
    let pre_mask = spec.iter().map(|z| z.abs()).collect();
    mask.apply(&mut spec);
    let post_mask = spec.iter().map(|z| z.abs()).collect();
    for (p, z) in buf.chunks_exact_mut(2).zip(&spec) {
        p[0] = z.re;
        p[1] = z.im;
    }
    plan.process(&mut buf, true);
    let residue = buf
        .chunks_exact(2)
        .map(|p| libm::fabs(p[1]))
        .fold(0.0, f64::max);
    if residue >= IMAG_TOLERANCE {
        return Err(Error::ImaginaryResidue(residue));
    }
    let reconstructed = buf.chunks_exact(2).take(signal.len()).map(|p| p[0]).collect();
    Ok(FilteredSignal {
        pre_mask,
        post_mask,
        reconstructed,
    })
}
