//! Tape-based reverse-mode automatic differentiation.
//!
//! Nodes are appended in execution order, so the node list is already a
//! topological order and `backward` is a single reverse sweep. Gradients of
//! a value used at several sites are summed.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use super::conv::{self, Geom3};
use super::fft::FftPlan;
use super::tensor::{numel, strides, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation implemented outside the graph (fused kernels).
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Vector-Jacobian product: gradient w.r.t. each input given the output
    /// gradient. Entries for inputs with `needs[i] == false` may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Result<Vec<Option<Vec<f64>>>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Sigmoid(Var),
    Silu(Var),
    Softplus(Var),
    Square(Var),
    MatMul(Var, Var),
    Conv {
        x: Var,
        w: Var,
        geom: Geom3,
    },
    Upsample {
        x: Var,
        factors: [usize; 3],
    },
    LayerNorm {
        x: Var,
        rstd: Vec<f64>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    Pool {
        x: Var,
        routes: Vec<usize>,
        kind: PoolKind,
    },
    AdaptiveMeanPool {
        x: Var,
    },
    MaxAxis {
        x: Var,
        argmax: Vec<usize>,
    },
    Sum(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    Reverse {
        x: Var,
        axis: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Pad {
        x: Var,
        axis: usize,
        before: usize,
    },
    Fft {
        x: Var,
        inverse: bool,
    },
    ComplexMul(Var, Var),
    HermitianExpand {
        x: Var,
    },
    CausalConv1d {
        x: Var,
        w: Var,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PoolKind {
    Max,
    Mean,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Record of executed differentiable operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

/// `(outer, n, inner)` view of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside broadcast shape `out` (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let st = strides(shape);
    let r = out.len();
    let mut s = vec![0; r];
    for i in 0..shape.len() {
        let j = r - shape.len() + i;
        if shape[i] != 1 {
            s[j] = st[i];
        }
    }
    s
}

/// Calls `f(out_index, a_index, b_index)` over every element of `out`.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let r = out.len();
    if r == 0 {
        f(0, 0, 0);
        return;
    }
    let last = out[r - 1];
    let (la, lb) = (sa[r - 1], sb[r - 1]);
    let rows = numel(&out[..r - 1]);
    let mut idx = vec![0usize; r - 1];
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut o = 0;
    for _ in 0..rows {
        for j in 0..last {
            f(o, ia + j * la, ib + j * lb);
            o += 1;
        }
        // odometer over leading axes
        for d in (0..r - 1).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// `(rows, k) x (k, n)` row-major product.
pub(crate) fn matmul_rows(a: &[f64], b: &[f64], rows: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * n];
    for i in 0..rows {
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[kk * n..(kk + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        libm::log1p(libm::exp(x))
    }
}

fn lift_spatial(shape: &[usize]) -> [usize; 3] {
    let mut s = [1; 3];
    let off = 3 - shape.len();
    s[off..].copy_from_slice(shape);
    s
}

/// Output extent of a non-overlapping pooling and a map from
/// `(plane, output offset)` to the flat input offsets of its window.
fn pool_windows(
    input: [usize; 3],
    kernel: [usize; 3],
) -> ([usize; 3], impl Fn(usize, usize) -> Vec<usize>) {
    let out = [
        input[0] / kernel[0],
        input[1] / kernel[1],
        input[2] / kernel[2],
    ];
    let isz: usize = input.iter().product();
    (out, move |plane: usize, o: usize| {
        let oz = o / (out[1] * out[2]);
        let oy = (o / out[2]) % out[1];
        let ox = o % out[2];
        let mut v = Vec::with_capacity(kernel.iter().product());
        for kz in 0..kernel[0] {
            for ky in 0..kernel[1] {
                for kx in 0..kernel[2] {
                    let iz = oz * kernel[0] + kz;
                    let iy = oy * kernel[1] + ky;
                    let ix = ox * kernel[2] + kx;
                    v.push(plane * isz + (iz * input[1] + iy) * input[2] + ix);
                }
            }
        }
        v
    })
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; no gradient is tracked.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// A trainable leaf; receives a gradient on `backward`.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push_node(t, Op::Leaf, requires_grad)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient of the last `backward` output w.r.t. `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.shape(v).to_vec(), g.clone()))
    }

    /// Clears gradients so `backward` may run again.
    pub fn reset(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push_node(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        Ok(self.push_node(value, op, needs))
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ---------------------------------------------------------------- binary

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = if sa == sb {
            let d = self
                .data(a)
                .iter()
                .zip(self.data(b))
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::from_parts(sa, d)
        } else {
            let shape = broadcast_shape(&sa, &sb).ok_or(Error::ShapeMismatch {
                op: name,
                expected: sa.clone(),
                got: sb.clone(),
            })?;
            let (ta, tb) = (broadcast_strides(&sa, &shape), broadcast_strides(&sb, &shape));
            let (da, db) = (self.data(a), self.data(b));
            let mut d = vec![0.0; numel(&shape)];
            for_each_broadcast(&shape, &ta, &tb, |o, ia, ib| d[o] = f(da[ia], db[ib]));
            Tensor::from_parts(shape, d)
        };
        self.push(name, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    // ----------------------------------------------------------------- unary

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.value(a).map(f);
        self.push(name, out, op, &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary("neg", a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, libm::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary("ln", a, libm::log, Op::Ln(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary("silu", a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus, Op::Softplus(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    // -------------------------------------------------------------- products

    /// `(..., m, k) x (k, n) -> (..., m, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                expected: sa,
                got: sb,
            });
        }
        let (k, n) = (sb[0], sb[1]);
        let rows = numel(&sa) / k;
        let out = matmul_rows(self.data(a), self.data(b), rows, k, n);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        self.push(
            "matmul",
            Tensor::from_parts(shape, out),
            Op::MatMul(a, b),
            &[a, b],
        )
    }

    /// Cross-correlation of `x: (B, Cin, *S)` with `w: (Cout, Cin, *K)` for
    /// one to three spatial axes.
    pub fn conv(&mut self, x: Var, w: Var, stride: &[usize], padding: &[usize]) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let mismatch = || Error::ShapeMismatch {
            op: "conv",
            expected: sx.clone(),
            got: sw.clone(),
        };
        if sx.len() < 3 || sx.len() != sw.len() || sx[1] != sw[1] {
            return Err(mismatch());
        }
        let geom = Geom3::lift(&sx[2..], &sw[2..], stride, padding).ok_or_else(mismatch)?;
        let (batch, cin, cout) = (sx[0], sx[1], sw[0]);
        let y = conv::forward(self.data(x), self.data(w), batch, cin, cout, &geom);
        let mut shape = vec![batch, cout];
        shape.extend_from_slice(&geom.output[3 - (sx.len() - 2)..]);
        self.push(
            "conv",
            Tensor::from_parts(shape, y),
            Op::Conv { x, w, geom },
            &[x, w],
        )
    }

    /// Depthwise causal convolution along the sequence axis of `x: (B, L, D)`
    /// with `w: (D, K)`; output `t` sees inputs `t-K+1 ..= t`.
    pub fn causal_conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 2 || sw[0] != sx[2] {
            return Err(Error::ShapeMismatch {
                op: "causal_conv1d",
                expected: sx,
                got: sw,
            });
        }
        let (b, l, d, k) = (sx[0], sx[1], sx[2], sw[1]);
        let (dx, dw) = (self.data(x), self.data(w));
        let mut y = vec![0.0; b * l * d];
        for bi in 0..b {
            for t in 0..l {
                let orow = &mut y[(bi * l + t) * d..][..d];
                for j in 0..k {
                    let Some(src) = (t + j + 1).checked_sub(k) else {
                        continue;
                    };
                    let irow = &dx[(bi * l + src) * d..][..d];
                    for c in 0..d {
                        orow[c] += dw[c * k + j] * irow[c];
                    }
                }
            }
        }
        self.push(
            "causal_conv1d",
            Tensor::from_parts(sx, y),
            Op::CausalConv1d { x, w },
            &[x, w],
        )
    }

    // ------------------------------------------------------ spatial resizing

    /// Nearest-neighbour upsampling of `(B, C, *S)` by integer factors.
    pub fn upsample_nearest(&mut self, x: Var, factors: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 3 || sx.len() > 5 || factors.len() != sx.len() - 2 || factors.contains(&0) {
            return Err(Error::InvalidShape {
                op: "upsample_nearest",
                shape: sx,
                reason: "expected (B, C, spatial...) with one factor per spatial axis",
            });
        }
        let inp = lift_spatial(&sx[2..]);
        let f = lift_spatial(factors);
        let out = [inp[0] * f[0], inp[1] * f[1], inp[2] * f[2]];
        let planes = sx[0] * sx[1];
        let (isz, osz): (usize, usize) = (inp.iter().product(), out.iter().product());
        let d = self.data(x);
        let mut y = vec![0.0; planes * osz];
        for p in 0..planes {
            let src = &d[p * isz..][..isz];
            let dst = &mut y[p * osz..][..osz];
            for oz in 0..out[0] {
                for oy in 0..out[1] {
                    let irow = ((oz / f[0]) * inp[1] + oy / f[1]) * inp[2];
                    let orow = (oz * out[1] + oy) * out[2];
                    for ox in 0..out[2] {
                        dst[orow + ox] = src[irow + ox / f[2]];
                    }
                }
            }
        }
        let mut shape = sx[..2].to_vec();
        shape.extend(sx[2..].iter().zip(factors).map(|(s, f)| s * f));
        self.push(
            "upsample_nearest",
            Tensor::from_parts(shape, y),
            Op::Upsample { x, factors: f },
            &[x],
        )
    }

    fn pool(&mut self, x: Var, kernel: &[usize], kind: PoolKind) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let name = if kind == PoolKind::Max { "max_pool" } else { "mean_pool" };
        if sx.len() < 3
            || sx.len() > 5
            || kernel.len() != sx.len() - 2
            || sx[2..].iter().zip(kernel).any(|(s, k)| *k == 0 || s % k != 0)
        {
            return Err(Error::InvalidShape {
                op: name,
                shape: sx,
                reason: "spatial extents must be divisible by the window",
            });
        }
        let planes = sx[0] * sx[1];
        let (out, windows) = pool_windows(lift_spatial(&sx[2..]), lift_spatial(kernel));
        let osz: usize = out.iter().product();
        let d = self.data(x);
        let mut y = vec![0.0; planes * osz];
        let mut routes = Vec::new();
        for p in 0..planes {
            for o in 0..osz {
                let w = windows(p, o);
                y[p * osz + o] = match kind {
                    PoolKind::Max => {
                        let mut best = w[0];
                        for &i in &w[1..] {
                            if d[i] > d[best] {
                                best = i;
                            }
                        }
                        routes.push(best);
                        d[best]
                    }
                    PoolKind::Mean => w.iter().map(|&i| d[i]).sum::<f64>() / w.len() as f64,
                };
            }
        }
        let mut shape = sx[..2].to_vec();
        shape.extend(sx[2..].iter().zip(kernel).map(|(s, k)| s / k));
        if kind == PoolKind::Mean {
            routes = kernel.to_vec();
        }
        self.push(name, Tensor::from_parts(shape, y), Op::Pool { x, routes, kind }, &[x])
    }

    /// Non-overlapping max pooling over the spatial axes of `(B, C, *S)`.
    pub fn max_pool(&mut self, x: Var, kernel: &[usize]) -> Result<Var> {
        self.pool(x, kernel, PoolKind::Max)
    }

    /// Non-overlapping mean pooling over the spatial axes of `(B, C, *S)`.
    pub fn mean_pool(&mut self, x: Var, kernel: &[usize]) -> Result<Var> {
        self.pool(x, kernel, PoolKind::Mean)
    }

    /// Mean-pools the last axis to `out` bins; bin `i` covers
    /// `floor(i*n/out) .. ceil((i+1)*n/out)`.
    pub fn adaptive_mean_pool(&mut self, x: Var, out: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.is_empty() || out == 0 {
            return Err(Error::invalid("adaptive_mean_pool", "need rank >= 1 and out >= 1"));
        }
        let n = *sx.last().unwrap();
        let rows = numel(&sx) / n;
        let d = self.data(x);
        let mut y = vec![0.0; rows * out];
        for r in 0..rows {
            for i in 0..out {
                let (s, e) = adaptive_bin(i, n, out);
                y[r * out + i] = d[r * n + s..r * n + e].iter().sum::<f64>() / (e - s) as f64;
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = out;
        self.push(
            "adaptive_mean_pool",
            Tensor::from_parts(shape, y),
            Op::AdaptiveMeanPool { x },
            &[x],
        )
    }

    // ------------------------------------------------------------ reductions

    /// Maximum along `axis`, keeping it with extent 1. Gradient routes to the
    /// first maximal element.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.check_axis("max_axis", x, axis)?;
        let (outer, n, inner) = split_axis(&sx, axis);
        let d = self.data(x);
        let mut y = vec![0.0; outer * inner];
        let mut argmax = vec![0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut best = base;
                for k in 1..n {
                    let j = base + k * inner;
                    if d[j] > d[best] {
                        best = j;
                    }
                }
                y[o * inner + i] = d[best];
                argmax[o * inner + i] = best;
            }
        }
        let mut shape = sx;
        shape[axis] = 1;
        self.push(
            "max_axis",
            Tensor::from_parts(shape, y),
            Op::MaxAxis { x, argmax },
            &[x],
        )
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.check_axis("sum_axis", x, axis)?;
        let (outer, n, inner) = split_axis(&sx, axis);
        let d = self.data(x);
        let mut y = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &d[(o * n + k) * inner..][..inner];
                for (yv, v) in y[o * inner..][..inner].iter_mut().zip(src) {
                    *yv += v;
                }
            }
        }
        let mut shape = sx;
        shape[axis] = 1;
        self.push("sum_axis", Tensor::from_parts(shape, y), Op::SumAxis { x, axis }, &[x])
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<Vec<usize>> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(Error::invalid(op, "axis out of range"));
        }
        Ok(sx)
    }

    // --------------------------------------------------------- normalization

    /// Normalizes the last axis to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.is_empty() {
            return Err(Error::invalid("layer_norm", "needs rank >= 1"));
        }
        let n = *sx.last().unwrap();
        let rows = numel(&sx) / n;
        let d = self.data(x);
        let mut y = vec![0.0; d.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &d[r * n..][..n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let rs = 1.0 / libm::sqrt(var + eps);
            rstd[r] = rs;
            for (o, v) in y[r * n..][..n].iter_mut().zip(row) {
                *o = (v - mu) * rs;
            }
        }
        self.push(
            "layer_norm",
            Tensor::from_parts(sx, y),
            Op::LayerNorm { x, rstd },
            &[x],
        )
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, log: bool) -> Result<Var> {
        let name = if log { "log_softmax" } else { "softmax" };
        let sx = self.check_axis(name, x, axis)?;
        let (outer, n, inner) = split_axis(&sx, axis);
        let d = self.data(x);
        let mut y = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).map(|k| d[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..n).map(|k| libm::exp(d[at(k)] - m)).sum();
                let lz = libm::log(z);
                for k in 0..n {
                    y[at(k)] = if log {
                        d[at(k)] - m - lz
                    } else {
                        libm::exp(d[at(k)] - m) / z
                    };
                }
            }
        }
        let op = if log {
            Op::LogSoftmax { x, axis }
        } else {
            Op::Softmax { x, axis }
        };
        self.push(name, Tensor::from_parts(sx, y), op, &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, false)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, true)
    }

    // ---------------------------------------------------------- data layout

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        if perm.len() != sx.len() || perm.iter().any(|&p| p >= sx.len() || core::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("permute", "not a permutation of the axes"));
        }
        let shape: Vec<usize> = perm.iter().map(|&p| sx[p]).collect();
        let ist = strides(&sx);
        let pst: Vec<usize> = perm.iter().map(|&p| ist[p]).collect();
        let zero = vec![0; shape.len()];
        let d = self.data(x);
        let mut y = vec![0.0; d.len()];
        for_each_broadcast(&shape, &pst, &zero, |o, i, _| y[o] = d[i]);
        self.push(
            "permute",
            Tensor::from_parts(shape, y),
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        )
    }

    pub fn reverse(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.check_axis("reverse", x, axis)?;
        let (outer, n, inner) = split_axis(&sx, axis);
        let d = self.data(x);
        let mut y = vec![0.0; d.len()];
        for o in 0..outer {
            for k in 0..n {
                let src = (o * n + k) * inner;
                let dst = (o * n + n - 1 - k) * inner;
                y[dst..dst + inner].copy_from_slice(&d[src..src + inner]);
            }
        }
        self.push("reverse", Tensor::from_parts(sx, y), Op::Reverse { x, axis }, &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let s0 = self.check_axis("concat", first, axis)?;
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == s0.len()
                && s.iter().zip(&s0).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    expected: s0,
                    got: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&s0, axis);
        let mut y = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let n = self.shape(v)[axis];
                y.extend_from_slice(&self.data(v)[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        self.push(
            "concat",
            Tensor::from_parts(shape, y),
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.check_axis("slice", x, axis)?;
        if len == 0 || start + len > sx[axis] {
            return Err(Error::invalid("slice", "range outside axis"));
        }
        let (outer, n, inner) = split_axis(&sx, axis);
        let d = self.data(x);
        let mut y = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            y.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = sx;
        shape[axis] = len;
        self.push(
            "slice",
            Tensor::from_parts(shape, y),
            Op::Slice { x, axis, start },
            &[x],
        )
    }

    /// Zero padding along `axis`.
    pub fn pad(&mut self, x: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        let sx = self.check_axis("pad", x, axis)?;
        let (outer, n, inner) = split_axis(&sx, axis);
        let m = n + before + after;
        let d = self.data(x);
        let mut y = vec![0.0; outer * m * inner];
        for o in 0..outer {
            let dst = (o * m + before) * inner;
            y[dst..dst + n * inner].copy_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
        }
        let mut shape = sx;
        shape[axis] = m;
        self.push("pad", Tensor::from_parts(shape, y), Op::Pad { x, axis, before }, &[x])
    }

    // --------------------------------------------------------------- complex

    fn check_complex(&self, op: &'static str, x: Var) -> Result<Vec<usize>> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || s[s.len() - 1] != 2 {
            return Err(Error::InvalidShape {
                op,
                shape: s,
                reason: "complex tensors have a trailing (re, im) axis of extent 2",
            });
        }
        Ok(s)
    }

    /// DFT along axis `-2` of a complex tensor `(..., n, 2)`; `n` must be a
    /// power of two. The inverse carries the `1/n` factor.
    pub fn fft(&mut self, x: Var, inverse: bool) -> Result<Var> {
        let s = self.check_complex("fft", x)?;
        let n = s[s.len() - 2];
        let plan = FftPlan::new(n)?;
        let mut y = self.data(x).to_vec();
        for chunk in y.chunks_exact_mut(2 * n) {
            plan.process(chunk, inverse);
        }
        self.push(
            "fft",
            Tensor::from_parts(s, y),
            Op::Fft { x, inverse },
            &[x],
        )
    }

    /// Elementwise complex product; `b` broadcasts against `a` over the
    /// non-complex axes.
    pub fn complex_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.check_complex("complex_mul", a)?;
        let sb = self.check_complex("complex_mul", b)?;
        let ea = &sa[..sa.len() - 1];
        let eb = &sb[..sb.len() - 1];
        let es = broadcast_shape(ea, eb).ok_or(Error::ShapeMismatch {
            op: "complex_mul",
            expected: sa.clone(),
            got: sb.clone(),
        })?;
        let (ta, tb) = (broadcast_strides(ea, &es), broadcast_strides(eb, &es));
        let (da, db) = (self.data(a), self.data(b));
        let mut y = vec![0.0; numel(&es) * 2];
        for_each_broadcast(&es, &ta, &tb, |o, ia, ib| {
            let (ar, ai) = (da[2 * ia], da[2 * ia + 1]);
            let (br, bi) = (db[2 * ib], db[2 * ib + 1]);
            y[2 * o] = ar * br - ai * bi;
            y[2 * o + 1] = ar * bi + ai * br;
        });
        let mut shape = es;
        shape.push(2);
        self.push(
            "complex_mul",
            Tensor::from_parts(shape, y),
            Op::ComplexMul(a, b),
            &[a, b],
        )
    }

    /// Expands a half spectrum `(..., n/2 + 1, 2)` to a conjugate-symmetric
    /// full spectrum `(..., n, 2)`. Imaginary parts at DC and Nyquist are
    /// pinned to zero.
    pub fn hermitian_expand(&mut self, x: Var, n: usize) -> Result<Var> {
        let s = self.check_complex("hermitian_expand", x)?;
        let h = s[s.len() - 2];
        if n == 0 || h != half_len(n) {
            return Err(Error::InvalidShape {
                op: "hermitian_expand",
                shape: s,
                reason: "half spectrum must have n/2 + 1 bins",
            });
        }
        let d = self.data(x);
        let rows = d.len() / (2 * h);
        let mut y = vec![0.0; rows * n * 2];
        for r in 0..rows {
            let src = &d[r * 2 * h..][..2 * h];
            let dst = &mut y[r * 2 * n..][..2 * n];
            for k in 0..h {
                dst[2 * k] = src[2 * k];
                let edge = k == 0 || 2 * k == n;
                dst[2 * k + 1] = if edge { 0.0 } else { src[2 * k + 1] };
                if !edge {
                    dst[2 * (n - k)] = src[2 * k];
                    dst[2 * (n - k) + 1] = -src[2 * k + 1];
                }
            }
        }
        let mut shape = s;
        let r = shape.len();
        shape[r - 2] = n;
        self.push(
            "hermitian_expand",
            Tensor::from_parts(shape, y),
            Op::HermitianExpand { x },
            &[x],
        )
    }

    // ---------------------------------------------------------------- custom

    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        let name = op.name();
        self.push(
            name,
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        )
    }

    // -------------------------------------------------------------- backward

    /// Backpropagates from a scalar output.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        let shape = self.shape(out).to_vec();
        if numel(&shape) != 1 {
            return Err(Error::NonScalarOutput(shape));
        }
        self.backward_with(out, Tensor::full(&shape, 1.0))
    }

    /// Backpropagates an explicit output gradient.
    pub fn backward_with(&mut self, out: Var, seed: Tensor) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if seed.shape() != self.shape(out) {
            return Err(Error::ShapeMismatch {
                op: "backward",
                expected: self.shape(out).to_vec(),
                got: seed.shape().to_vec(),
            });
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[out.0] = Some(seed.into_data());
        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let contributions = self.vjp(i, &g)?;
            for (v, delta) in contributions {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut self.grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(delta),
                }
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient contributions of node `i` to its parents.
    fn vjp(&self, i: usize, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) | &Op::Sub(a, b) | &Op::Mul(a, b) | &Op::Div(a, b) => {
                let (da, db) = (self.data(a), self.data(b));
                let (sa, sb) = (self.shape(a), self.shape(b));
                let mut ga = vec![0.0; da.len()];
                let mut gb = vec![0.0; db.len()];
                let oshape = node.value.shape();
                let (ta, tb) = (broadcast_strides(sa, oshape), broadcast_strides(sb, oshape));
                let kind = &node.op;
                for_each_broadcast(oshape, &ta, &tb, |o, ia, ib| {
                    let gv = g[o];
                    match kind {
                        Op::Add(..) => {
                            ga[ia] += gv;
                            gb[ib] += gv;
                        }
                        Op::Sub(..) => {
                            ga[ia] += gv;
                            gb[ib] -= gv;
                        }
                        Op::Mul(..) => {
                            ga[ia] += gv * db[ib];
                            gb[ib] += gv * da[ia];
                        }
                        _ => {
                            ga[ia] += gv / db[ib];
                            gb[ib] -= gv * da[ia] / (db[ib] * db[ib]);
                        }
                    }
                });
                out.push((a, ga));
                out.push((b, gb));
            }
            &Op::Neg(a) => out.push((a, g.iter().map(|v| -v).collect())),
            &Op::Scale(a, c) => out.push((a, g.iter().map(|v| v * c).collect())),
            &Op::AddScalar(a) => out.push((a, g.to_vec())),
            &Op::Exp(a) => out.push((a, g.iter().zip(y).map(|(g, y)| g * y).collect())),
            &Op::Ln(a) => out.push((a, g.iter().zip(self.data(a)).map(|(g, x)| g / x).collect())),
            &Op::Sigmoid(a) => out.push((
                a,
                g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
            )),
            &Op::Silu(a) => out.push((
                a,
                g.iter()
                    .zip(self.data(a))
                    .map(|(g, &x)| {
                        let s = sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect(),
            )),
            &Op::Softplus(a) => out.push((
                a,
                g.iter().zip(self.data(a)).map(|(g, &x)| g * sigmoid(x)).collect(),
            )),
            &Op::Square(a) => out.push((
                a,
                g.iter().zip(self.data(a)).map(|(g, x)| 2.0 * g * x).collect(),
            )),
            &Op::MatMul(a, b) => {
                let (da, db) = (self.data(a), self.data(b));
                let (k, n) = (self.shape(b)[0], self.shape(b)[1]);
                let rows = da.len() / k;
                if self.needs(a) {
                    let mut ga = vec![0.0; da.len()];
                    for r in 0..rows {
                        let grow = &g[r * n..(r + 1) * n];
                        for kk in 0..k {
                            ga[r * k + kk] = grow
                                .iter()
                                .zip(&db[kk * n..(kk + 1) * n])
                                .map(|(x, y)| x * y)
                                .sum();
                        }
                    }
                    out.push((a, ga));
                }
                if self.needs(b) {
                    let mut gb = vec![0.0; db.len()];
                    for r in 0..rows {
                        let grow = &g[r * n..(r + 1) * n];
                        for (kk, &av) in da[r * k..(r + 1) * k].iter().enumerate() {
                            if av == 0.0 {
                                continue;
                            }
                            for (o, gv) in gb[kk * n..(kk + 1) * n].iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                    out.push((b, gb));
                }
            }
            &Op::Conv { x, w, geom } => {
                let (sx, sw) = (self.shape(x), self.shape(w));
                let (dx, dw) = conv::backward(
                    self.data(x),
                    self.data(w),
                    g,
                    sx[0],
                    sx[1],
                    sw[0],
                    &geom,
                    self.needs(x),
                    self.needs(w),
                );
                if let Some(dx) = dx {
                    out.push((x, dx));
                }
                if let Some(dw) = dw {
                    out.push((w, dw));
                }
            }
            &Op::CausalConv1d { x, w } => {
                let (sx, k) = (self.shape(x), self.shape(w)[1]);
                let (b, l, d) = (sx[0], sx[1], sx[2]);
                let (xd, wd) = (self.data(x), self.data(w));
                let mut gx = vec![0.0; xd.len()];
                let mut gw = vec![0.0; wd.len()];
                for bi in 0..b {
                    for t in 0..l {
                        let grow = &g[(bi * l + t) * d..][..d];
                        for j in 0..k {
                            let Some(src) = (t + j + 1).checked_sub(k) else {
                                continue;
                            };
                            let base = (bi * l + src) * d;
                            for c in 0..d {
                                gx[base + c] += wd[c * k + j] * grow[c];
                                gw[c * k + j] += xd[base + c] * grow[c];
                            }
                        }
                    }
                }
                out.push((x, gx));
                out.push((w, gw));
            }
            Op::Upsample { x, factors } => {
                let sx = self.shape(*x);
                let inp = lift_spatial(&sx[2..]);
                let f = *factors;
                let o3 = [inp[0] * f[0], inp[1] * f[1], inp[2] * f[2]];
                let planes = sx[0] * sx[1];
                let (isz, osz): (usize, usize) = (inp.iter().product(), o3.iter().product());
                let mut gx = vec![0.0; planes * isz];
                for p in 0..planes {
                    for oz in 0..o3[0] {
                        for oy in 0..o3[1] {
                            let irow = p * isz + ((oz / f[0]) * inp[1] + oy / f[1]) * inp[2];
                            let orow = p * osz + (oz * o3[1] + oy) * o3[2];
                            for ox in 0..o3[2] {
                                gx[irow + ox / f[2]] += g[orow + ox];
                            }
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::Pool { x, routes, kind } => {
                let sx = self.shape(*x);
                let mut gx = vec![0.0; numel(sx)];
                match kind {
                    PoolKind::Max => {
                        for (gv, &src) in g.iter().zip(routes) {
                            gx[src] += gv;
                        }
                    }
                    PoolKind::Mean => {
                        let planes = sx[0] * sx[1];
                        let (o3, windows) =
                            pool_windows(lift_spatial(&sx[2..]), lift_spatial(routes));
                        let osz: usize = o3.iter().product();
                        for p in 0..planes {
                            for o in 0..osz {
                                let w = windows(p, o);
                                let share = g[p * osz + o] / w.len() as f64;
                                for src in w {
                                    gx[src] += share;
                                }
                            }
                        }
                    }
                }
                out.push((*x, gx));
            }
            &Op::AdaptiveMeanPool { x } => {
                let sx = self.shape(x);
                let n = *sx.last().unwrap();
                let p = *node.value.shape().last().unwrap();
                let rows = numel(sx) / n;
                let mut gx = vec![0.0; rows * n];
                for r in 0..rows {
                    for i in 0..p {
                        let (s, e) = adaptive_bin(i, n, p);
                        let share = g[r * p + i] / (e - s) as f64;
                        gx[r * n + s..r * n + e].iter_mut().for_each(|v| *v += share);
                    }
                }
                out.push((x, gx));
            }
            Op::MaxAxis { x, argmax } => {
                let mut gx = vec![0.0; self.value(*x).len()];
                for (gv, &src) in g.iter().zip(argmax) {
                    gx[src] += gv;
                }
                out.push((*x, gx));
            }
            &Op::Sum(x) => out.push((x, vec![g[0]; self.value(x).len()])),
            &Op::SumAxis { x, axis } => {
                let (outer, n, inner) = split_axis(self.shape(x), axis);
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        gx[(o * n + k) * inner..][..inner]
                            .copy_from_slice(&g[o * inner..][..inner]);
                    }
                }
                out.push((x, gx));
            }
            &Op::LayerNorm { x, ref rstd } => {
                let n = *self.shape(x).last().unwrap();
                let mut gx = vec![0.0; g.len()];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &g[r * n..][..n];
                    let yr = &y[r * n..][..n];
                    let mg = gr.iter().sum::<f64>() / n as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        gx[r * n + j] = rs * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                out.push((x, gx));
            }
            &Op::Softmax { x, axis } | &Op::LogSoftmax { x, axis } => {
                let log = matches!(node.op, Op::LogSoftmax { .. });
                let (outer, n, inner) = split_axis(self.shape(x), axis);
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        if log {
                            let gs: f64 = (0..n).map(|k| g[at(k)]).sum();
                            for k in 0..n {
                                gx[at(k)] = g[at(k)] - libm::exp(y[at(k)]) * gs;
                            }
                        } else {
                            let dot: f64 = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..n {
                                gx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                }
                out.push((x, gx));
            }
            &Op::Reshape(x) => out.push((x, g.to_vec())),
            Op::Permute { x, perm } => {
                let sx = self.shape(*x);
                let ist = strides(sx);
                let pst: Vec<usize> = perm.iter().map(|&p| ist[p]).collect();
                let zero = vec![0; pst.len()];
                let mut gx = vec![0.0; g.len()];
                for_each_broadcast(node.value.shape(), &pst, &zero, |o, i, _| gx[i] = g[o]);
                out.push((*x, gx));
            }
            &Op::Reverse { x, axis } => {
                let (outer, n, inner) = split_axis(self.shape(x), axis);
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for k in 0..n {
                        let src = (o * n + n - 1 - k) * inner;
                        let dst = (o * n + k) * inner;
                        gx[dst..dst + inner].copy_from_slice(&g[src..src + inner]);
                    }
                }
                out.push((x, gx));
            }
            Op::Concat { xs, axis } => {
                let oshape = node.value.shape();
                let (outer, total, inner) = split_axis(oshape, *axis);
                let mut offset = 0;
                for &v in xs {
                    let n = self.shape(v)[*axis];
                    let mut gv = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gv.extend_from_slice(&g[base..base + n * inner]);
                    }
                    offset += n;
                    out.push((v, gv));
                }
            }
            &Op::Slice { x, axis, start } => {
                let (outer, n, inner) = split_axis(self.shape(x), axis);
                let len = node.value.shape()[axis];
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    gx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((x, gx));
            }
            &Op::Pad { x, axis, before } => {
                let (outer, n, inner) = split_axis(self.shape(x), axis);
                let m = node.value.shape()[axis];
                let mut gx = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    let base = (o * m + before) * inner;
                    gx.extend_from_slice(&g[base..base + n * inner]);
                }
                out.push((x, gx));
            }
            &Op::Fft { x, inverse } => {
                // Adjoint of the unnormalized DFT is n * IDFT; adjoint of the
                // IDFT (with its 1/n) is DFT / n.
                let s = self.shape(x);
                let n = s[s.len() - 2];
                let plan = FftPlan::new(n)?;
                let mut gx = g.to_vec();
                let scale = n as f64;
                for chunk in gx.chunks_exact_mut(2 * n) {
                    plan.process(chunk, !inverse);
                    let c = if inverse { 1.0 / scale } else { scale };
                    chunk.iter_mut().for_each(|v| *v *= c);
                }
                out.push((x, gx));
            }
            &Op::ComplexMul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let ea = &sa[..sa.len() - 1];
                let eb = &sb[..sb.len() - 1];
                let oshape = node.value.shape();
                let es = &oshape[..oshape.len() - 1];
                let (ta, tb) = (broadcast_strides(ea, es), broadcast_strides(eb, es));
                let (da, db) = (self.data(a), self.data(b));
                let mut ga = vec![0.0; da.len()];
                let mut gb = vec![0.0; db.len()];
                for_each_broadcast(es, &ta, &tb, |o, ia, ib| {
                    let (gr, gi) = (g[2 * o], g[2 * o + 1]);
                    let (ar, ai) = (da[2 * ia], da[2 * ia + 1]);
                    let (br, bi) = (db[2 * ib], db[2 * ib + 1]);
                    // g * conj(b), g * conj(a)
                    ga[2 * ia] += gr * br + gi * bi;
                    ga[2 * ia + 1] += gi * br - gr * bi;
                    gb[2 * ib] += gr * ar + gi * ai;
                    gb[2 * ib + 1] += gi * ar - gr * ai;
                });
                out.push((a, ga));
                out.push((b, gb));
            }
            &Op::HermitianExpand { x } => {
                let s = self.shape(x);
                let h = s[s.len() - 2];
                let n = node.value.shape()[s.len() - 2];
                let rows = self.value(x).len() / (2 * h);
                let mut gx = vec![0.0; rows * 2 * h];
                for r in 0..rows {
                    let gr = &g[r * 2 * n..][..2 * n];
                    let dst = &mut gx[r * 2 * h..][..2 * h];
                    for k in 0..h {
                        let edge = k == 0 || 2 * k == n;
                        dst[2 * k] = gr[2 * k];
                        if !edge {
                            dst[2 * k] += gr[2 * (n - k)];
                            dst[2 * k + 1] = gr[2 * k + 1] - gr[2 * (n - k) + 1];
                        }
                    }
                }
                out.push((x, gx));
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|v| self.needs(*v)).collect();
                let grads = op.backward(&vals, &node.value, g, &needs)?;
                for (v, gv) in inputs.iter().zip(grads) {
                    if let Some(gv) = gv {
                        out.push((*v, gv));
                    }
                }
            }
        }
        Ok(out)
    }
}

fn adaptive_bin(i: usize, n: usize, out: usize) -> (usize, usize) {
    let s = i * n / out;
    let e = ((i + 1) * n).div_ceil(out);
    (s, e.max(s + 1))
}

/// Bins in the half spectrum of an `n`-point real signal.
pub fn half_len(n: usize) -> usize {
    if n == 1 {
        1
    } else {
        n / 2 + 1
    }
}
