//! Naive single-head self-attention, the quadratic-cost baseline for scan
//! timing.

use alloc::vec;

use crate::numcore::Tensor;
use crate::{Error, Result};

/// `softmax(Q K^T / sqrt(C)) V` for one `(L, C)` sequence, with `Q = X Wq`,
/// `K = X Wk`, `V = X Wv`. Scores are computed one row at a time.
pub fn self_attention(x: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 2 || [wq, wk, wv].iter().any(|w| w.shape() != [s[1], s[1]]) {
        return Err(Error::ShapeMismatch {
            op: "self_attention",
            expected: vec![s.get(1).copied().unwrap_or(0); 2],
            got: wq.shape().to_vec(),
        });
    }
    let (l, c) = (s[0], s[1]);
    let q = project(x.data(), wq.data(), l, c);
    let k = project(x.data(), wk.data(), l, c);
    let v = project(x.data(), wv.data(), l, c);
    let scale = 1.0 / libm::sqrt(c as f64);
    let mut out = vec![0.0; l * c];
    let mut row = vec![0.0; l];
    for i in 0..l {
        let qi = &q[i * c..(i + 1) * c];
        let mut max = f64::NEG_INFINITY;
        for (j, r) in row.iter_mut().enumerate() {
            let kj = &k[j * c..(j + 1) * c];
            *r = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            max = max.max(*r);
        }
        let mut total = 0.0;
        for r in row.iter_mut() {
            *r = libm::exp(*r - max);
            total += *r;
        }
        let oi = &mut out[i * c..(i + 1) * c];
        for (j, r) in row.iter().enumerate() {
            let w = r / total;
            for (o, vj) in oi.iter_mut().zip(&v[j * c..(j + 1) * c]) {
                *o += w * vj;
            }
        }
    }
    Tensor::new(&[l, c], out)
}

fn project(x: &[f64], w: &[f64], l: usize, c: usize) -> alloc::vec::Vec<f64> {
    let mut y = vec![0.0; l * c];
    for i in 0..l {
        for k in 0..c {
            let xv = x[i * c + k];
            for (o, wv) in y[i * c..(i + 1) * c].iter_mut().zip(&w[k * c..(k + 1) * c]) {
                *o += xv * wv;
            }
        }
    }
    y
}
