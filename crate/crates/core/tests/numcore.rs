use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tmamba_core::numcore::{
    fft1d, grad_check, ifft1d, Complex, ComplexVector, Graph, Tensor, Var,
};
use tmamba_core::{Error, Result};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_complex(n: usize, seed: u64) -> ComplexVector {
    let t = Tensor::randn(&[n, 2], 1.0, &mut rng(seed));
    ComplexVector::new(
        t.data()
            .chunks(2)
            .map(|p| Complex::new(p[0], p[1]))
            .collect(),
    )
}

// O(n^2) summation, sign -1 forward, +1 with 1/n inverse.
fn direct_dft(x: &ComplexVector, inverse: bool) -> Vec<Complex> {
    let n = x.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    (0..n)
        .map(|k| {
            let mut acc = Complex::ZERO;
            for (t, v) in x.values().iter().enumerate() {
                let ang = sign * 2.0 * PI * ((k * t) % n) as f64 / n as f64;
                acc = acc + *v * Complex::cis(ang);
            }
            if inverse {
                acc.scale(1.0 / n as f64)
            } else {
                acc
            }
        })
        .collect()
}

fn max_diff(a: &[Complex], b: &[Complex]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x - *y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn fft_matches_direct_dft() {
    let x = random_complex(16, 1);
    let fast = fft1d(&x).unwrap();
    assert!(max_diff(fast.values(), &direct_dft(&x, false)) <= 1e-12);
}

#[test]
fn ifft_matches_direct_inverse_dft() {
    let x = random_complex(8, 2);
    let fast = ifft1d(&x).unwrap();
    assert!(max_diff(fast.values(), &direct_dft(&x, true)) <= 1e-12);
}

#[test]
fn fft_round_trip_and_parseval() {
    for (n, seed) in [(32, 3), (64, 4), (1024, 5)] {
        let x = random_complex(n, seed);
        let spec = fft1d(&x).unwrap();
        let back = ifft1d(&spec).unwrap();
        assert!(max_diff(back.values(), x.values()) <= 1e-12);
        let lhs = x.energy();
        let rhs = spec.energy() / n as f64;
        assert!(((lhs - rhs) / lhs).abs() <= 1e-10);
    }
}

#[test]
fn backward_polynomial_and_accumulation() {
    let mut g = Graph::new();
    let a = g.param(Tensor::scalar(3.0));
    let y = g.square(a).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(a).unwrap().item(), 6.0);

    let mut g = Graph::new();
    let a = g.param(Tensor::scalar(3.0));
    let y = g.add(a, a).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(a).unwrap().item(), 2.0);
}

#[test]
fn backward_twice_needs_reset() {
    let mut g = Graph::new();
    let a = g.param(Tensor::scalar(1.5));
    let y = g.exp(a).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.backward(y), Err(Error::BackwardTwice));
    g.reset();
    g.backward(y).unwrap();
    assert!((g.grad(a).unwrap().item() - 1.5f64.exp()).abs() < 1e-15);
}

#[test]
fn backward_requires_scalar_or_seed() {
    let mut g = Graph::new();
    let a = g.param(Tensor::zeros(&[3]));
    let y = g.exp(a).unwrap();
    assert!(matches!(g.backward(y), Err(Error::NonScalarOutput(_))));
    assert!(g.backward_with(y, Tensor::zeros(&[2])).is_err());
    g.backward_with(y, Tensor::full(&[3], 2.0)).unwrap();
    assert_eq!(g.grad(a).unwrap().data(), &[2.0, 2.0, 2.0]);
}

#[test]
fn leaf_used_k_times_scales_gradient() {
    let w = Tensor::randn(&[5], 1.0, &mut rng(9));
    let single = {
        let mut g = Graph::new();
        let a = g.param(w.clone());
        let c = g.constant(Tensor::from_fn(&[5], |i| i as f64 - 2.0));
        let y = g.mul(a, c).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        g.grad(a).unwrap()
    };
    for k in 2..5 {
        let mut g = Graph::new();
        let a = g.param(w.clone());
        let c = g.constant(Tensor::from_fn(&[5], |i| i as f64 - 2.0));
        let mut acc = g.mul(a, c).unwrap();
        for _ in 1..k {
            let t = g.mul(a, c).unwrap();
            acc = g.add(acc, t).unwrap();
        }
        let s = g.sum(acc).unwrap();
        g.backward(s).unwrap();
        let got = g.grad(a).unwrap();
        for (x, y) in got.data().iter().zip(single.data()) {
            assert_eq!(*x, k as f64 * y);
        }
    }
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::scalar(-1.0));
    assert!(matches!(g.ln(a), Err(Error::NonFinite { .. })));
    let b = g.constant(Tensor::scalar(800.0));
    assert!(matches!(g.exp(b), Err(Error::NonFinite { .. })));
}

#[test]
fn grad_check_sum_of_squares_is_exact() {
    let p = vec![Tensor::randn(&[4, 3], 1.0, &mut rng(10))];
    // no truncation error for a quadratic, so a wide step only cuts roundoff
    let rep = grad_check(&p, 1e-3, |g, v| {
        let s = g.square(v[0])?;
        g.sum(s)
    })
    .unwrap();
    assert!(rep.max_rel_err < 1e-9, "{}", rep.max_rel_err);
}

#[test]
fn grad_check_rejects_non_finite_function() {
    let p = vec![Tensor::scalar(0.0)];
    let r = grad_check(&p, 1e-5, |g, v| {
        let d = g.div(v[0], v[0])?;
        g.sum(d)
    });
    assert!(r.is_err());
}

#[test]
fn layer_norm_of_matmul_matches_finite_differences() {
    let mut r = rng(11);
    let params = vec![
        Tensor::randn(&[4, 4], 1.0, &mut r),
        Tensor::randn(&[4, 4], 1.0, &mut r),
    ];
    let proj = Tensor::randn(&[4, 4], 1.0, &mut r);
    let rep = grad_check(&params, 1e-5, |g, v| {
        let m = g.matmul(v[0], v[1])?;
        let n = g.layer_norm(m, 1e-5)?;
        let p = g.constant(proj.clone());
        let y = g.mul(n, p)?;
        g.sum(y)
    })
    .unwrap();
    assert!(rep.max_rel_err < 1e-6, "{}", rep.max_rel_err);
}

/// Checks `f` of one random input with a random linear read-out.
fn check_primitive(
    name: &str,
    shape: &[usize],
    seed: u64,
    f: impl Fn(&mut Graph, Var) -> Result<Var>,
) {
    let mut r = rng(seed);
    let x = Tensor::randn(shape, 1.0, &mut r);
    let probe_seed = seed + 1000;
    let rep = grad_check(&[x], 1e-5, |g, v| {
        let y = f(g, v[0])?;
        let proj = Tensor::randn(g.shape(y), 1.0, &mut rng(probe_seed));
        let p = g.constant(proj);
        let z = g.mul(y, p)?;
        g.sum(z)
    })
    .unwrap();
    assert!(rep.max_rel_err < 1e-6, "{name}: {}", rep.max_rel_err);
}

#[test]
fn elementwise_primitives_pass_grad_check() {
    check_primitive("exp", &[3, 4], 1, |g, x| g.exp(x));
    check_primitive("sigmoid", &[3, 4], 2, |g, x| g.sigmoid(x));
    check_primitive("silu", &[3, 4], 3, |g, x| g.silu(x));
    check_primitive("softplus", &[3, 4], 4, |g, x| g.softplus(x));
    check_primitive("square", &[3, 4], 5, |g, x| g.square(x));
    check_primitive("neg_scale", &[5], 6, |g, x| {
        let y = g.neg(x)?;
        let y = g.scale(y, 2.5)?;
        g.add_scalar(y, 1.0)
    });
    check_primitive("ln", &[6], 7, |g, x| {
        let e = g.exp(x)?;
        let e = g.add_scalar(e, 0.5)?;
        g.ln(e)
    });
}

#[test]
fn broadcasting_binary_primitives_pass_grad_check() {
    let mut r = rng(20);
    let params = vec![
        Tensor::randn(&[2, 3, 4], 1.0, &mut r),
        Tensor::randn(&[3, 1], 1.0, &mut r),
        Tensor::uniform(&[4], 1.0, 2.0, &mut r),
    ];
    let rep = grad_check(&params, 1e-5, |g, v| {
        let a = g.add(v[0], v[1])?;
        let b = g.mul(a, v[2])?;
        let c = g.sub(b, v[1])?;
        let d = g.div(c, v[2])?;
        let e = g.mul(d, a)?;
        g.sum(e)
    })
    .unwrap();
    assert!(rep.max_rel_err < 1e-6, "{}", rep.max_rel_err);
}

#[test]
fn matmul_passes_grad_check() {
    let mut r = rng(21);
    let params = vec![
        Tensor::randn(&[2, 3, 4], 1.0, &mut r),
        Tensor::randn(&[4, 5], 1.0, &mut r),
    ];
    let rep = grad_check(&params, 1e-5, |g, v| {
        let m = g.matmul(v[0], v[1])?;
        let s = g.square(m)?;
        g.sum(s)
    })
    .unwrap();
    assert!(rep.max_rel_err < 1e-6, "{}", rep.max_rel_err);
}

#[test]
fn convolutions_pass_grad_check() {
    let cases: &[(&[usize], &[usize], &[usize], &[usize])] = &[
        (&[2, 2, 7], &[3, 2, 3], &[1], &[1]),
        (&[1, 2, 5, 6], &[2, 2, 3, 3], &[1, 1], &[1, 1]),
        (&[1, 2, 6, 6], &[3, 2, 3, 3], &[2, 2], &[1, 1]),
        (&[1, 1, 4, 4, 3], &[2, 1, 3, 3, 3], &[2, 2, 1], &[1, 1, 1]),
        (&[1, 2, 4, 4, 4], &[2, 2, 1, 1, 1], &[1, 1, 1], &[0, 0, 0]),
    ];
    for (i, (xs, ws, stride, pad)) in cases.iter().enumerate() {
        let mut r = rng(30 + i as u64);
        let params = vec![Tensor::randn(xs, 1.0, &mut r), Tensor::randn(ws, 1.0, &mut r)];
        let rep = grad_check(&params, 1e-5, |g, v| {
            let y = g.conv(v[0], v[1], stride, pad)?;
            let s = g.square(y)?;
            g.sum(s)
        })
        .unwrap();
        assert!(rep.max_rel_err < 1e-6, "case {i}: {}", rep.max_rel_err);
    }
}

#[test]
fn conv_output_shapes() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 3, 8, 8]));
    let w = g.constant(Tensor::zeros(&[5, 3, 3, 3]));
    let y = g.conv(x, w, &[2, 2], &[1, 1]).unwrap();
    assert_eq!(g.shape(y), &[2, 5, 4, 4]);
    let bad = g.constant(Tensor::zeros(&[5, 2, 3, 3]));
    assert!(g.conv(x, bad, &[1, 1], &[1, 1]).is_err());
}

#[test]
fn causal_conv1d_passes_grad_check_and_is_causal() {
    let mut r = rng(40);
    let params = vec![
        Tensor::randn(&[2, 6, 3], 1.0, &mut r),
        Tensor::randn(&[3, 4], 1.0, &mut r),
    ];
    let rep = grad_check(&params, 1e-5, |g, v| {
        let y = g.causal_conv1d(v[0], v[1])?;
        let s = g.square(y)?;
        g.sum(s)
    })
    .unwrap();
    assert!(rep.max_rel_err < 1e-6, "{}", rep.max_rel_err);

    // perturbing step 3 leaves steps 0..3 unchanged
    let mut g = Graph::new();
    let x = params[0].clone();
    let mut x2 = x.clone();
    x2.data_mut()[3 * 3] += 1.0;
    let w = g.constant(params[1].clone());
    let a = g.constant(x);
    let b = g.constant(x2);
    let ya = g.causal_conv1d(a, w).unwrap();
    let yb = g.causal_conv1d(b, w).unwrap();
    assert_eq!(g.value(ya).data()[..9], g.value(yb).data()[..9]);
    assert_ne!(g.value(ya).data()[9..12], g.value(yb).data()[9..12]);
}

#[test]
fn resampling_and_pooling_pass_grad_check() {
    check_primitive("upsample2d", &[1, 2, 3, 2], 50, |g, x| g.upsample_nearest(x, &[2, 3]));
    check_primitive("upsample3d", &[1, 1, 2, 2, 2], 51, |g, x| {
        g.upsample_nearest(x, &[2, 1, 2])
    });
    check_primitive("max_pool", &[1, 2, 4, 4], 52, |g, x| g.max_pool(x, &[2, 2]));
    check_primitive("mean_pool", &[2, 1, 4, 2, 2], 53, |g, x| g.mean_pool(x, &[2, 2, 1]));
    check_primitive("adaptive_mean_pool", &[2, 10], 54, |g, x| g.adaptive_mean_pool(x, 4));
    check_primitive("adaptive_mean_pool_up", &[2, 3], 55, |g, x| g.adaptive_mean_pool(x, 5));
    check_primitive("max_axis", &[3, 5, 2], 56, |g, x| g.max_axis(x, 1));
}

#[test]
fn pooling_values() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_fn(&[1, 1, 2, 4], |i| i as f64));
    let m = g.max_pool(x, &[2, 2]).unwrap();
    assert_eq!(g.value(m).data(), &[5.0, 7.0]);
    let a = g.mean_pool(x, &[2, 2]).unwrap();
    assert_eq!(g.value(a).data(), &[2.5, 4.5]);
    let v = g.constant(Tensor::from_fn(&[1, 6], |i| i as f64));
    let p = g.adaptive_mean_pool(v, 3).unwrap();
    assert_eq!(g.value(p).data(), &[0.5, 2.5, 4.5]);
    assert!(g.max_pool(x, &[3, 2]).is_err());
}

#[test]
fn normalization_and_softmax_pass_grad_check() {
    check_primitive("layer_norm", &[3, 5], 60, |g, x| g.layer_norm(x, 1e-5));
    check_primitive("softmax_last", &[2, 4], 61, |g, x| g.softmax(x, 1));
    check_primitive("softmax_mid", &[2, 3, 4], 62, |g, x| g.softmax(x, 1));
    check_primitive("log_softmax", &[2, 3, 2, 2], 63, |g, x| g.log_softmax(x, 1));
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::randn(&[4, 3, 5], 3.0, &mut rng(64)));
    let s = g.softmax(x, 1).unwrap();
    let t = g.value(s);
    for o in 0..4 {
        for i in 0..5 {
            let sum: f64 = (0..3).map(|k| t.get(&[o, k, i])).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn layout_primitives_pass_grad_check() {
    check_primitive("reverse", &[2, 5, 3], 70, |g, x| g.reverse(x, 1));
    check_primitive("reshape", &[2, 6], 71, |g, x| g.reshape(x, &[3, 4]));
    check_primitive("permute", &[2, 3, 4], 72, |g, x| g.permute(x, &[2, 0, 1]));
    check_primitive("slice", &[2, 6, 3], 73, |g, x| g.slice(x, 1, 2, 3));
    check_primitive("pad", &[2, 3], 74, |g, x| g.pad(x, 1, 1, 2));
    check_primitive("sum_axis", &[2, 3, 4], 75, |g, x| g.sum_axis(x, 1));
    check_primitive("mean", &[7], 76, |g, x| g.mean(x));
    check_primitive("concat", &[2, 3], 77, |g, x| {
        let y = g.square(x)?;
        let z = g.exp(x)?;
        g.concat(&[x, y, z], 1)
    });
}

#[test]
fn permute_and_reverse_values() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
    let p = g.permute(x, &[1, 0]).unwrap();
    assert_eq!(g.shape(p), &[3, 2]);
    assert_eq!(g.value(p).data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    let r = g.reverse(x, 1).unwrap();
    assert_eq!(g.value(r).data(), &[2.0, 1.0, 0.0, 5.0, 4.0, 3.0]);
    assert!(g.permute(x, &[0, 0]).is_err());
}

#[test]
fn spectral_primitives_pass_grad_check() {
    check_primitive("fft", &[2, 8, 2], 80, |g, x| g.fft(x, false));
    check_primitive("ifft", &[3, 4, 2], 81, |g, x| g.fft(x, true));
    check_primitive("hermitian_expand", &[2, 5, 2], 82, |g, x| g.hermitian_expand(x, 8));
    let mut r = rng(83);
    let params = vec![
        Tensor::randn(&[2, 3, 4, 2], 1.0, &mut r),
        Tensor::randn(&[3, 4, 2], 1.0, &mut r),
    ];
    let rep = grad_check(&params, 1e-5, |g, v| {
        let y = g.complex_mul(v[0], v[1])?;
        let s = g.square(y)?;
        g.sum(s)
    })
    .unwrap();
    assert!(rep.max_rel_err < 1e-6, "{}", rep.max_rel_err);
}

#[test]
fn graph_fft_agrees_with_vector_fft() {
    let x = random_complex(16, 90);
    let mut g = Graph::new();
    let flat: Vec<f64> = x.values().iter().flat_map(|c| [c.re, c.im]).collect();
    let v = g.constant(Tensor::new(&[16, 2], flat).unwrap());
    let y = g.fft(v, false).unwrap();
    let want = fft1d(&x).unwrap();
    for (k, c) in want.values().iter().enumerate() {
        assert_eq!(g.value(y).data()[2 * k], c.re);
        assert_eq!(g.value(y).data()[2 * k + 1], c.im);
    }
}

#[test]
fn forward_is_bit_identical_across_runs() {
    let run = || {
        let mut r = rng(99);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[1, 2, 6, 6], 1.0, &mut r));
        let w = g.constant(Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r));
        let y = g.conv(x, w, &[1, 1], &[1, 1]).unwrap();
        let y = g.silu(y).unwrap();
        let y = g.softmax(y, 1).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(), run());
}
