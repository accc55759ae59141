//! Diagonal state-space machinery: zero-order-hold discretization, the
//! selective (input-dependent) recurrent scan, the time-invariant
//! convolution-kernel form, and bidirectional wrapping.
//!
//! State matrices are diagonal with negative real entries, so every
//! discretization formula is evaluated elementwise.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::graph::{matmul_rows, softplus};
use crate::numcore::{CustomOp, Graph, Tensor, Var};

/// Default state size.
pub const DEFAULT_STATE: usize = 16;
/// Range of the initial step size `softplus(bias)`.
pub const DELTA_INIT_RANGE: (f64, f64) = (0.001, 0.1);

/// `(exp(z) - 1) / z`, with its series limit near zero.
#[inline]
pub fn phi(z: f64) -> f64 {
    if libm::fabs(z) < 1e-6 {
        1.0 + 0.5 * z
    } else {
        libm::expm1(z) / z
    }
}

#[inline]
fn phi_prime(z: f64) -> f64 {
    if libm::fabs(z) < 1e-3 {
        0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0
    } else {
        (z * libm::exp(z) - libm::expm1(z)) / (z * z)
    }
}

/// Zero-order hold for one diagonal entry:
/// `a_bar = exp(delta*a)`, `b_bar = (delta*a)^-1 (exp(delta*a) - 1) * delta*b`.
pub fn discretize_zoh(a: f64, b: f64, delta: f64) -> Result<(f64, f64)> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::invalid("discretize_zoh", "step must be positive and finite"));
    }
    let z = delta * a;
    Ok((libm::exp(z), delta * b * phi(z)))
}

/// A time-invariant single-input single-output diagonal system after
/// discretization. `c` is carried over unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSsm {
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
    pub c: Vec<f64>,
}

impl DiscreteSsm {
    pub fn from_continuous(a: &[f64], b: &[f64], c: &[f64], delta: f64) -> Result<Self> {
        if a.len() != b.len() || a.len() != c.len() {
            return Err(Error::ShapeMismatch {
                op: "discretize_zoh",
                expected: vec![a.len()],
                got: vec![b.len(), c.len()],
            });
        }
        let (a_bar, b_bar) = a
            .iter()
            .zip(b)
            .map(|(&a, &b)| discretize_zoh(a, b, delta))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        Ok(Self {
            a_bar,
            b_bar,
            c: c.to_vec(),
        })
    }

    pub fn state_size(&self) -> usize {
        self.a_bar.len()
    }
}

/// `K = (C B, C A B, C A^2 B, ..., C A^{L-1} B)`.
pub fn lti_kernel(sys: &DiscreteSsm, len: usize) -> Result<Vec<f64>> {
    let mut power = sys.b_bar.clone();
    let mut k = Vec::with_capacity(len);
    for _ in 0..len {
        k.push(power.iter().zip(&sys.c).map(|(p, c)| p * c).sum::<f64>());
        for (p, a) in power.iter_mut().zip(&sys.a_bar) {
            *p *= a;
        }
    }
    if k.iter().all(|v| v.is_finite()) {
        Ok(k)
    } else {
        Err(Error::NonFinite { op: "lti_kernel" })
    }
}

/// Causal convolution `y_t = sum_{j<=t} k_j x_{t-j}`.
pub fn causal_convolve(x: &[f64], kernel: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|t| {
            (0..=t.min(kernel.len().saturating_sub(1)))
                .map(|j| kernel[j] * x[t - j])
                .sum()
        })
        .collect()
}

/// Recurrent evaluation of a time-invariant system given in continuous form,
/// through the same kernel as the selective scan with frozen per-step inputs.
pub fn lti_scan(a: &[f64], b: &[f64], c: &[f64], delta: f64, x: &[f64]) -> Result<Vec<f64>> {
    if !(delta > 0.0) {
        return Err(Error::invalid("lti_scan", "step must be positive"));
    }
    let n = a.len();
    let l = x.len();
    let dims = ScanDims {
        batch: 1,
        len: l,
        dim: 1,
        state: n,
    };
    let delta = vec![delta; l];
    let bm: Vec<f64> = (0..l).flat_map(|_| b.iter().copied()).collect();
    let cm: Vec<f64> = (0..l).flat_map(|_| c.iter().copied()).collect();
    let (y, _) = scan_forward(&dims, x, &delta, a, &bm, &cm, false)?;
    Ok(y)
}

// ------------------------------------------------------------------ kernel

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub batch: usize,
    pub len: usize,
    pub dim: usize,
    pub state: usize,
}

/// Selective scan over `u, delta: (B, L, D)`, `a: (D, N)`, `b, c: (B, L, N)`:
/// `h_t = exp(delta_t a) h_{t-1} + delta_t phi(delta_t a) b_t u_t`,
/// `y_t = c_t . h_t`, `h_0 = 0`. Optionally returns every state
/// `(B, L, D, N)` for the backward pass.
pub fn scan_forward(
    dims: &ScanDims,
    u: &[f64],
    delta: &[f64],
    a: &[f64],
    bm: &[f64],
    cm: &[f64],
    keep_states: bool,
) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    let ScanDims {
        batch,
        len,
        dim,
        state,
    } = *dims;
    let mut y = vec![0.0; batch * len * dim];
    let mut states = keep_states.then(|| vec![0.0; batch * len * dim * state]);
    let mut h = vec![0.0; state];
    let mut inv_a = vec![0.0; state];
    for b in 0..batch {
        for d in 0..dim {
            h.iter_mut().for_each(|v| *v = 0.0);
            let arow = &a[d * state..][..state];
            for (i, av) in inv_a.iter_mut().zip(arow) {
                *i = 1.0 / av;
            }
            for t in 0..len {
                let at = (b * len + t) * dim + d;
                let (dt, ut) = (delta[at], u[at]);
                let brow = &bm[(b * len + t) * state..][..state];
                let crow = &cm[(b * len + t) * state..][..state];
                let mut acc = 0.0;
                for n in 0..state {
                    let em1 = libm::expm1(dt * arow[n]);
                    // delta * phi(delta * a) = expm1(delta * a) / a
                    let gain = if inv_a[n].is_finite() { em1 * inv_a[n] } else { dt };
                    h[n] = (em1 + 1.0) * h[n] + gain * brow[n] * ut;
                    acc += crow[n] * h[n];
                }
                y[at] = acc;
                if let Some(s) = states.as_mut() {
                    s[at * state..][..state].copy_from_slice(&h);
                }
            }
            if !h.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { op: "selective_scan" });
            }
        }
    }
    if !y.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { op: "selective_scan" });
    }
    Ok((y, states))
}

struct ScanOp {
    dims: ScanDims,
    states: Vec<f64>,
}

impl CustomOp for ScanOp {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
        _needs: &[bool],
    ) -> Result<Vec<Option<Vec<f64>>>> {
        let ScanDims {
            batch,
            len,
            dim,
            state,
        } = self.dims;
        let [u, delta, a, bm, cm] = [0, 1, 2, 3, 4].map(|i| inputs[i].data());
        let mut gu = vec![0.0; u.len()];
        let mut gdelta = vec![0.0; delta.len()];
        let mut ga = vec![0.0; a.len()];
        let mut gb = vec![0.0; bm.len()];
        let mut gc = vec![0.0; cm.len()];
        let mut gh = vec![0.0; state];
        let zeros = vec![0.0; state];
        for b in 0..batch {
            for d in 0..dim {
                gh.iter_mut().for_each(|v| *v = 0.0);
                let arow = &a[d * state..][..state];
                for t in (0..len).rev() {
                    let at = (b * len + t) * dim + d;
                    let (dt, ut, dy) = (delta[at], u[at], grad[at]);
                    let row = (b * len + t) * state;
                    let brow = &bm[row..][..state];
                    let crow = &cm[row..][..state];
                    let h_t = &self.states[at * state..][..state];
                    let h_prev = if t == 0 {
                        &zeros[..]
                    } else {
                        &self.states[(at - dim) * state..][..state]
                    };
                    let (mut d_delta, mut d_u) = (0.0, 0.0);
                    for n in 0..state {
                        gh[n] += dy * crow[n];
                        gc[row + n] += dy * h_t[n];
                        let an = arow[n];
                        let z = dt * an;
                        let ab = libm::exp(z);
                        let ph = phi(z);
                        let coef = dt * ph;
                        let dcoef = gh[n] * brow[n] * ut;
                        gb[row + n] += gh[n] * coef * ut;
                        d_u += gh[n] * coef * brow[n];
                        let dz = gh[n] * h_prev[n] * ab + dcoef * dt * phi_prime(z);
                        d_delta += dcoef * ph + dz * an;
                        ga[d * state + n] += dz * dt;
                        gh[n] *= ab;
                    }
                    gdelta[at] = d_delta;
                    gu[at] = d_u;
                }
            }
        }
        Ok(vec![Some(gu), Some(gdelta), Some(ga), Some(gb), Some(gc)])
    }
}

/// Differentiable selective scan; shapes as in [`scan_forward`].
pub fn scan_graph(g: &mut Graph, u: Var, delta: Var, a: Var, bm: Var, cm: Var) -> Result<Var> {
    let su = g.shape(u).to_vec();
    let sa = g.shape(a).to_vec();
    let ok = su.len() == 3
        && g.shape(delta) == su.as_slice()
        && sa.len() == 2
        && sa[0] == su[2]
        && g.shape(bm) == [su[0], su[1], sa[1]]
        && g.shape(cm) == [su[0], su[1], sa[1]];
    if !ok {
        return Err(Error::ShapeMismatch {
            op: "selective_scan",
            expected: su,
            got: sa,
        });
    }
    let dims = ScanDims {
        batch: su[0],
        len: su[1],
        dim: su[2],
        state: sa[1],
    };
    let needs_grad = [u, delta, a, bm, cm].iter().any(|&v| g.requires_grad(v));
    let (y, states) = scan_forward(
        &dims,
        g.value(u).data(),
        g.value(delta).data(),
        g.value(a).data(),
        g.value(bm).data(),
        g.value(cm).data(),
        needs_grad,
    )?;
    let out = Tensor::new(&su, y)?;
    g.custom(
        &[u, delta, a, bm, cm],
        out,
        Box::new(ScanOp {
            dims,
            states: states.unwrap_or_default(),
        }),
    )
}

// -------------------------------------------------------------- parameters

/// Selective parameterization for `D` channels and `N` states:
/// `delta_t = softplus(x_t W_delta + delta_bias)`, `B_t = x_t W_b`,
/// `C_t = x_t W_c`, `A = -exp(a_log)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams {
    pub a_log: Tensor,
    pub w_delta: Tensor,
    pub delta_bias: Tensor,
    pub w_b: Tensor,
    pub w_c: Tensor,
}

/// Inverse of softplus.
pub fn softplus_inv(y: f64) -> f64 {
    y + libm::log(-libm::expm1(-y))
}

impl SsmParams {
    pub fn init<R: Rng + ?Sized>(dim: usize, state: usize, rng: &mut R) -> Self {
        let scale = 1.0 / libm::sqrt(dim as f64);
        let (lo, hi) = DELTA_INIT_RANGE;
        let a_log = Tensor::from_fn(&[dim, state], |i| libm::log((i % state + 1) as f64));
        let delta_bias = Tensor::from_fn(&[dim], |_| {
            let u: f64 = rng.random();
            let dt = libm::exp(libm::log(lo) + u * (libm::log(hi) - libm::log(lo)));
            softplus_inv(dt)
        });
        Self {
            a_log,
            w_delta: Tensor::randn(&[dim, dim], 0.1 * scale, rng),
            delta_bias,
            w_b: Tensor::randn(&[dim, state], scale, rng),
            w_c: Tensor::randn(&[dim, state], scale, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.a_log.shape()[0]
    }

    pub fn state_size(&self) -> usize {
        self.a_log.shape()[1]
    }

    /// Diagonal state entries `A = -exp(a_log)`, all strictly negative.
    pub fn a(&self) -> Vec<f64> {
        self.a_log.data().iter().map(|v| -libm::exp(*v)).collect()
    }

    pub fn tensors(&self) -> [&Tensor; 5] {
        [
            &self.a_log,
            &self.w_delta,
            &self.delta_bias,
            &self.w_b,
            &self.w_c,
        ]
    }
}

/// Graph handles for an [`SsmParams`] bundle.
#[derive(Clone, Copy, Debug)]
pub struct SsmVars {
    pub a_log: Var,
    pub w_delta: Var,
    pub delta_bias: Var,
    pub w_b: Var,
    pub w_c: Var,
}

impl SsmVars {
    pub fn bind(g: &mut Graph, p: &SsmParams, trainable: bool) -> Self {
        Self {
            a_log: g.leaf(p.a_log.clone(), trainable),
            w_delta: g.leaf(p.w_delta.clone(), trainable),
            delta_bias: g.leaf(p.delta_bias.clone(), trainable),
            w_b: g.leaf(p.w_b.clone(), trainable),
            w_c: g.leaf(p.w_c.clone(), trainable),
        }
    }
}

/// Differentiable selective scan of `x: (B, L, D)`.
pub fn selective_scan_graph(g: &mut Graph, x: Var, p: &SsmVars) -> Result<Var> {
    let lin = g.matmul(x, p.w_delta)?;
    let pre = g.add(lin, p.delta_bias)?;
    let delta = g.softplus(pre)?;
    let e = g.exp(p.a_log)?;
    let a = g.neg(e)?;
    let bm = g.matmul(x, p.w_b)?;
    let cm = g.matmul(x, p.w_c)?;
    scan_graph(g, x, delta, a, bm, cm)
}

/// `(y_forward, y_backward)` with `y_backward = reverse(scan(reverse(x)))`.
pub fn bidirectional_scan_graph(
    g: &mut Graph,
    x: Var,
    fwd: &SsmVars,
    bwd: &SsmVars,
) -> Result<(Var, Var)> {
    let yf = selective_scan_graph(g, x, fwd)?;
    let xr = g.reverse(x, 1)?;
    let yr = selective_scan_graph(g, xr, bwd)?;
    let yb = g.reverse(yr, 1)?;
    Ok((yf, yb))
}

fn as_batch(x: &Tensor) -> Result<Tensor> {
    match x.shape() {
        [l, d] => x.clone().reshape(&[1, *l, *d]),
        _ => Err(Error::InvalidShape {
            op: "selective_scan",
            shape: x.shape().to_vec(),
            reason: "expected a (L, D) sequence",
        }),
    }
}

/// Selective scan of one `(L, D)` sequence, evaluated directly without a
/// graph. Bit-identical to [`selective_scan_graph`].
pub fn selective_scan(x: &Tensor, params: &SsmParams) -> Result<Tensor> {
    params.freeze().scan(x)
}

/// Inference form of [`SsmParams`] with `A = -exp(a_log)` evaluated once.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenSsm {
    a: Vec<f64>,
    params: SsmParams,
}

impl SsmParams {
    pub fn freeze(&self) -> FrozenSsm {
        FrozenSsm {
            a: self.a(),
            params: self.clone(),
        }
    }
}

impl FrozenSsm {
    /// Scans one `(L, D)` sequence.
    pub fn scan(&self, x: &Tensor) -> Result<Tensor> {
        let p = &self.params;
        let [l, d] = *x.shape() else {
            return Err(Error::InvalidShape {
                op: "selective_scan",
                shape: x.shape().to_vec(),
                reason: "expected a (L, D) sequence",
            });
        };
        if d != p.dim() {
            return Err(Error::ShapeMismatch {
                op: "selective_scan",
                expected: vec![p.dim()],
                got: x.shape().to_vec(),
            });
        }
        let n = p.state_size();
        let u = x.data();
        let mut delta = matmul_rows(u, p.w_delta.data(), l, d, d);
        for row in delta.chunks_exact_mut(d) {
            for (v, bias) in row.iter_mut().zip(p.delta_bias.data()) {
                *v = softplus(*v + bias);
            }
        }
        let bm = matmul_rows(u, p.w_b.data(), l, d, n);
        let cm = matmul_rows(u, p.w_c.data(), l, d, n);
        let dims = ScanDims {
            batch: 1,
            len: l,
            dim: d,
            state: n,
        };
        let (y, _) = scan_forward(&dims, u, &delta, &self.a, &bm, &cm, false)?;
        Tensor::new(&[l, d], y)
    }
}

/// Bidirectional scan of one `(L, D)` sequence.
pub fn bidirectional_scan(
    x: &Tensor,
    fwd: &SsmParams,
    bwd: &SsmParams,
) -> Result<(Tensor, Tensor)> {
    let xb = as_batch(x)?;
    let mut g = Graph::new();
    let xv = g.constant(xb);
    let fv = SsmVars::bind(&mut g, fwd, false);
    let bv = SsmVars::bind(&mut g, bwd, false);
    let (yf, yb) = bidirectional_scan_graph(&mut g, xv, &fv, &bv)?;
    Ok((
        g.value(yf).clone().reshape(x.shape())?,
        g.value(yb).clone().reshape(x.shape())?,
    ))
}
