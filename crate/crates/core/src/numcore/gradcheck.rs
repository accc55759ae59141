//! Central finite-difference gradient oracle.

use alloc::vec::Vec;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max relative error per parameter tensor.
    pub per_param: Vec<f64>,
    pub max_rel_err: f64,
    pub evaluations: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = libm::fabs(analytic).max(libm::fabs(numeric)).max(1e-8);
    libm::fabs(analytic - numeric) / denom
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences, element by element over every parameter.
///
/// Each element is differentiated by [`ladder_difference`] starting at step
/// `eps`. Large steps keep roundoff in `f` below tiny gradients; the ladder
/// falls back to smaller steps where `f` has a kink within reach.
pub fn grad_check<F>(params: &[Tensor], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(params, &f)?;
    let mut work: Vec<Tensor> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    let mut evaluations = 0;
    for (p, grad) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for j in 0..params[p].len() {
            let (numeric, evals) = ladder_difference(&mut work, p, j, eps, &f)?;
            evaluations += evals;
            worst = worst.max(rel_err(grad.data()[j], numeric));
        }
        per_param.push(worst);
    }
    let max_rel_err = per_param.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_param,
        max_rel_err,
        evaluations,
    })
}

/// Five-point central difference of `f` along element `j` of parameter `p`.
/// `work` is restored before returning.
pub fn central_difference<F>(work: &mut [Tensor], p: usize, j: usize, eps: f64, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let orig = work[p].data()[j];
    let mut at = |d: f64| {
        work[p].data_mut()[j] = orig + d;
        evaluate(work, f)
    };
    let (p2, p1, m1, m2) = (at(2.0 * eps), at(eps), at(-eps), at(-2.0 * eps));
    work[p].data_mut()[j] = orig;
    Ok((8.0 * (p1? - m1?) - (p2? - m2?)) / (12.0 * eps))
}

const LADDER_RUNGS: usize = 10;
const LADDER_AGREEMENT: f64 = 1e-6;

/// Five-point central differences at steps `eps, eps/2, eps/4, ...`.
/// Stops once three successive estimates agree to a relative `1e-6` and
/// returns the middle one. Otherwise the estimate most consistent with its
/// two successors wins, with a bias toward larger steps; while the
/// discrepancies still shrink quickly the next finer estimate is used
/// instead. Also returns the number of evaluations of `f` spent.
/// Each rung reuses the previous rung's evaluations and costs two more.
pub fn ladder_difference<F>(
    work: &mut [Tensor],
    p: usize,
    j: usize,
    eps: f64,
    f: &F,
) -> Result<(f64, usize)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let orig = work[p].data()[j];
    let mut at = |d: f64| -> Result<f64> {
        work[p].data_mut()[j] = orig + d;
        let v = evaluate(work, f);
        work[p].data_mut()[j] = orig;
        v
    };
    // (f(x+2h) - f(x-2h)) of the rung above
    let mut wide = at(2.0 * eps)? - at(-2.0 * eps)?;
    let mut evals = 2;
    let mut h = eps;
    let mut estimates: Vec<f64> = Vec::with_capacity(LADDER_RUNGS);
    for _ in 0..LADDER_RUNGS {
        let narrow = at(h)? - at(-h)?;
        evals += 2;
        estimates.push((8.0 * narrow - wide) / (12.0 * h));
        let n = estimates.len();
        // A single coincident pair can come from quantization of f at
        // tiny gradients, so two consecutive pairs must agree.
        if n >= 3
            && rel_err(estimates[n - 3], estimates[n - 2]) <= LADDER_AGREEMENT
            && rel_err(estimates[n - 2], estimates[n - 1]) <= LADDER_AGREEMENT
        {
            return Ok((estimates[n - 2], evals));
        }
        wide = narrow;
        h *= 0.5;
    }
    // Roundoff doubles per rung, so a smaller step must be clearly more
    // consistent with its two successors before it is preferred.
    let score = |k: usize| {
        rel_err(estimates[k], estimates[k + 1]).max(rel_err(estimates[k + 1], estimates[k + 2]))
    };
    let mut best = 0;
    for k in 1..estimates.len() - 2 {
        if 3.0 * score(k) < score(best) {
            best = k;
        }
    }
    let coarse = rel_err(estimates[best], estimates[best + 1]);
    let fine = rel_err(estimates[best + 1], estimates[best + 2]);
    if 2.0 * fine < coarse {
        return Ok((estimates[best + 1], evals));
    }
    Ok((estimates[best], evals))
}

/// Reverse-mode gradient of `f` w.r.t. each parameter.
pub fn analytic_grads<F>(params: &[Tensor], f: &F) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).item().is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    g.backward(out)?;
    Ok(vars
        .iter()
        .map(|&v| g.grad(v).unwrap_or_else(|| Tensor::zeros(g.shape(v))))
        .collect())
}

/// Forward-only evaluation of the scalar `f`.
pub fn evaluate<F>(params: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let t = g.value(out);
    if t.len() != 1 {
        return Err(Error::NonScalarOutput(t.shape().to_vec()));
    }
    let v = t.item();
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    Ok(v)
}
