//! Iterative radix-2 Cooley-Tukey FFT over interleaved `(re, im)` buffers.
//!
//! Forward transforms are unnormalized; the inverse applies `1/N`.

use alloc::vec::Vec;
use core::f64::consts::PI;
use core::ops::{Add, Mul, Sub};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Complex {
    pub re: f64,
    pub im: f64,
}

impl Complex {
    pub const ZERO: Complex = Complex { re: 0.0, im: 0.0 };
    pub const ONE: Complex = Complex { re: 1.0, im: 0.0 };

    pub fn new(re: f64, im: f64) -> Self {
        Self { re, im }
    }

    pub fn conj(self) -> Self {
        Self::new(self.re, -self.im)
    }

    pub fn norm_sqr(self) -> f64 {
        self.re * self.re + self.im * self.im
    }

    pub fn abs(self) -> f64 {
        libm::hypot(self.re, self.im)
    }

    pub fn scale(self, s: f64) -> Self {
        Self::new(self.re * s, self.im * s)
    }

    /// `exp(i * theta)`
    pub fn cis(theta: f64) -> Self {
        Self::new(libm::cos(theta), libm::sin(theta))
    }
}

impl Add for Complex {
    type Output = Complex;
    fn add(self, o: Complex) -> Complex {
        Complex::new(self.re + o.re, self.im + o.im)
    }
}

impl Sub for Complex {
    type Output = Complex;
    fn sub(self, o: Complex) -> Complex {
        Complex::new(self.re - o.re, self.im - o.im)
    }
}

impl Mul for Complex {
    type Output = Complex;
    fn mul(self, o: Complex) -> Complex {
        Complex::new(
            self.re * o.re - self.im * o.im,
            self.re * o.im + self.im * o.re,
        )
    }
}

/// A complex signal whose length is a power of two on the transform paths.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexVector {
    values: Vec<Complex>,
}

impl ComplexVector {
    pub fn new(values: Vec<Complex>) -> Self {
        Self { values }
    }

    pub fn from_real(re: &[f64]) -> Self {
        Self::new(re.iter().map(|&r| Complex::new(r, 0.0)).collect())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[Complex] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Complex] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<Complex> {
        self.values
    }

    pub fn energy(&self) -> f64 {
        self.values.iter().map(|c| c.norm_sqr()).sum()
    }

    fn interleaved(&self) -> Vec<f64> {
        self.values.iter().flat_map(|c| [c.re, c.im]).collect()
    }

    fn from_interleaved(buf: &[f64]) -> Self {
        Self::new(
            buf.chunks_exact(2)
                .map(|p| Complex::new(p[0], p[1]))
                .collect(),
        )
    }
}

pub fn next_pow2(n: usize) -> usize {
    n.max(1).next_power_of_two()
}

/// Precomputed bit-reversal permutation and twiddles for one length.
#[derive(Clone, Debug)]
pub struct FftPlan {
    n: usize,
    rev: Vec<usize>,
    // exp(-2 pi i k / n) for k < n/2
    twiddles: Vec<Complex>,
}

impl FftPlan {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || !n.is_power_of_two() {
            return Err(Error::NotPowerOfTwo(n));
        }
        let bits = n.trailing_zeros();
        let rev = (0..n)
            .map(|i| {
                if bits == 0 {
                    0
                } else {
                    i.reverse_bits() >> (usize::BITS - bits)
                }
            })
            .collect();
        let twiddles = (0..n / 2)
            .map(|k| Complex::cis(-2.0 * PI * k as f64 / n as f64))
            .collect();
        Ok(Self { n, rev, twiddles })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// In-place transform of an interleaved buffer of `2 * n` values.
    /// `inverse` uses conjugate twiddles and scales by `1/n`.
    pub fn process(&self, buf: &mut [f64], inverse: bool) {
        let n = self.n;
        debug_assert_eq!(buf.len(), 2 * n);
        for i in 0..n {
            let j = self.rev[i];
            if j > i {
                buf.swap(2 * i, 2 * j);
                buf.swap(2 * i + 1, 2 * j + 1);
            }
        }
        let sign = if inverse { -1.0 } else { 1.0 };
        let mut half = 1;
        while half < n {
            let step = n / (2 * half);
            let mut start = 0;
            while start < n {
                for k in 0..half {
                    let w = self.twiddles[k * step];
                    let (wr, wi) = (w.re, sign * w.im);
                    let a = 2 * (start + k);
                    let b = 2 * (start + k + half);
                    let (br, bi) = (buf[b], buf[b + 1]);
                    let tr = br * wr - bi * wi;
                    let ti = br * wi + bi * wr;
                    let (ar, ai) = (buf[a], buf[a + 1]);
                    buf[a] = ar + tr;
                    buf[a + 1] = ai + ti;
                    buf[b] = ar - tr;
                    buf[b + 1] = ai - ti;
                }
                start += 2 * half;
            }
            half *= 2;
        }
        if inverse {
            let s = 1.0 / n as f64;
            buf.iter_mut().for_each(|v| *v *= s);
        }
    }
}

pub fn fft1d(x: &ComplexVector) -> Result<ComplexVector> {
    transform(x, false)
}

pub fn ifft1d(x: &ComplexVector) -> Result<ComplexVector> {
    transform(x, true)
}

fn transform(x: &ComplexVector, inverse: bool) -> Result<ComplexVector> {
    let plan = FftPlan::new(x.len())?;
    let mut buf = x.interleaved();
    plan.process(&mut buf, inverse);
    Ok(ComplexVector::from_interleaved(&buf))
}
