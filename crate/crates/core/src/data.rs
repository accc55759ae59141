//! Synthetic low-contrast, high-noise segmentation samples: arcs and blobs
//! in 2-d, ellipsoids in 3-d.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::numcore::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// 2 or 3.
    pub rank: usize,
    pub size: Vec<usize>,
    /// Inclusive range of foreground objects per sample.
    pub objects: (usize, usize),
    /// Foreground minus background mean intensity.
    pub contrast_gap: f64,
    pub noise_sigma: f64,
    /// Gaussian blur standard deviation in cells; 0 disables blurring.
    pub blur_radius: f64,
    pub background: f64,
    pub spacing: Vec<f64>,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(rank: usize, size: &[usize]) -> Self {
        Self {
            rank,
            size: size.to_vec(),
            objects: (1, 3),
            contrast_gap: 0.12,
            noise_sigma: 0.08,
            blur_radius: 0.8,
            background: 0.4,
            spacing: vec![1.0; size.len()],
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Err(Error::invalid("synth_config", reason));
        if !(2..=3).contains(&self.rank) || self.size.len() != self.rank || self.spacing.len() != self.rank {
            return bad("rank must be 2 or 3 and match size and spacing");
        }
        if self.size.iter().any(|s| *s < 8) {
            return bad("every extent must be at least 8");
        }
        if self.objects.0 == 0 || self.objects.0 > self.objects.1 {
            return bad("object range must be non-empty and start at 1 or more");
        }
        if !(self.contrast_gap > 0.0) || !(self.noise_sigma >= 0.0) || !(self.blur_radius >= 0.0) {
            return bad("contrast gap must be positive, noise and blur non-negative");
        }
        if !(0.0..=1.0).contains(&self.background) || self.spacing.iter().any(|s| !(*s > 0.0)) {
            return bad("background must lie in [0, 1] and spacing be positive");
        }
        Ok(())
    }

    pub fn numel(&self) -> usize {
        self.size.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub id: String,
    /// `(1, *size)`, values in `[0, 1]`.
    pub image: Tensor,
    /// Labels in `{0, 1}`, row-major over the grid.
    pub mask: Vec<u8>,
    pub spacing: Vec<f64>,
}

impl SegSample {
    pub fn size(&self) -> &[usize] {
        &self.image.shape()[1..]
    }

    pub fn labels(&self) -> Vec<usize> {
        self.mask.iter().map(|v| *v as usize).collect()
    }
}

/// Sample `index` of the dataset defined by `cfg`. Each sample draws from
/// its own generator seeded with `seed ^ index`.
pub fn synth_sample(cfg: &SynthConfig, index: u64) -> Result<SegSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ index);
    let n = cfg.numel();
    let mut mask = vec![0u8; n];
    let count = rng.random_range(cfg.objects.0..=cfg.objects.1);
    for _ in 0..count {
        let shape = if cfg.rank == 2 {
            if rng.random_bool(0.6) {
                Shape::arc(&cfg.size, &mut rng)
            } else {
                Shape::ellipse(&cfg.size, &mut rng)
            }
        } else {
            Shape::ellipsoid(&cfg.size, &mut rng)
        };
        for (i, m) in mask.iter_mut().enumerate() {
            if *m == 0 && shape.contains(&coords(i, &cfg.size)) {
                *m = 1;
            }
        }
    }
    let clean: Vec<f64> = mask
        .iter()
        .map(|m| cfg.background + if *m == 1 { cfg.contrast_gap } else { 0.0 })
        .collect();
    let mut image = gaussian_blur(&clean, &cfg.size, cfg.blur_radius);
    if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|_| Error::invalid("synth", "bad noise sigma"))?;
        for v in image.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    for v in image.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    let mut shape = vec![1];
    shape.extend(&cfg.size);
    Ok(SegSample {
        id: format!("synth-{index:05}"),
        image: Tensor::new(&shape, image)?,
        mask,
        spacing: cfg.spacing.clone(),
    })
}

/// Samples `start .. start + count`.
pub fn synth_generate(cfg: &SynthConfig, start: u64, count: usize) -> Result<Vec<SegSample>> {
    (0..count as u64).map(|i| synth_sample(cfg, start + i)).collect()
}

/// Disjoint train and test sets: test indices follow the training ones.
pub fn synth_split(cfg: &SynthConfig, train: usize, test: usize) -> Result<(Vec<SegSample>, Vec<SegSample>)> {
    Ok((
        synth_generate(cfg, 0, train)?,
        synth_generate(cfg, train as u64, test)?,
    ))
}

/// Stacks samples into an image batch `(B, 1, *size)` and flat labels.
pub fn stack(samples: &[&SegSample]) -> Result<(Tensor, Vec<usize>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("stack", "no samples"))?;
    let per = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.image.len());
    let mut labels = Vec::with_capacity(samples.len() * first.mask.len());
    for s in samples {
        if s.image.shape() != per.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "stack",
                expected: per.clone(),
                got: s.image.shape().to_vec(),
            });
        }
        data.extend_from_slice(s.image.data());
        labels.extend(s.mask.iter().map(|v| *v as usize));
    }
    let mut shape = vec![samples.len()];
    shape.extend(&per);
    Ok((Tensor::new(&shape, data)?, labels))
}

fn coords(mut i: usize, size: &[usize]) -> Vec<f64> {
    let mut c = vec![0.0; size.len()];
    for a in (0..size.len()).rev() {
        c[a] = (i % size[a]) as f64;
        i /= size[a];
    }
    c
}

enum Shape {
    /// Annular sector: centre, radius, half thickness, start angle, span.
    Arc {
        c: [f64; 2],
        r: f64,
        half: f64,
        start: f64,
        span: f64,
    },
    /// Rotated ellipse or ellipsoid (rotation in the first two axes).
    Ellipsoid {
        c: Vec<f64>,
        semi: Vec<f64>,
        angle: f64,
    },
}

impl Shape {
    fn arc<R: Rng + ?Sized>(size: &[usize], rng: &mut R) -> Self {
        let m = size[0].min(size[1]) as f64;
        let r = rng.random_range(0.22..0.4) * m;
        Shape::Arc {
            c: [
                rng.random_range(0.3..0.7) * size[0] as f64,
                rng.random_range(0.3..0.7) * size[1] as f64,
            ],
            r,
            half: 0.5 * rng.random_range(0.09..0.15) * m,
            start: rng.random_range(0.0..2.0 * PI),
            span: rng.random_range(0.4 * PI..1.2 * PI),
        }
    }

    fn ellipse<R: Rng + ?Sized>(size: &[usize], rng: &mut R) -> Self {
        Shape::Ellipsoid {
            c: size.iter().map(|s| rng.random_range(0.2..0.8) * *s as f64).collect(),
            semi: size.iter().map(|s| rng.random_range(0.07..0.16) * *s as f64).collect(),
            angle: rng.random_range(0.0..PI),
        }
    }

    fn ellipsoid<R: Rng + ?Sized>(size: &[usize], rng: &mut R) -> Self {
        Shape::Ellipsoid {
            c: size.iter().map(|s| rng.random_range(0.3..0.7) * *s as f64).collect(),
            semi: size.iter().map(|s| rng.random_range(0.14..0.28) * *s as f64).collect(),
            angle: rng.random_range(0.0..PI),
        }
    }

    fn contains(&self, p: &[f64]) -> bool {
        match self {
            Shape::Arc { c, r, half, start, span } => {
                let (dy, dx) = (p[0] - c[0], p[1] - c[1]);
                let d = libm::sqrt(dy * dy + dx * dx);
                if (d - r).abs() > *half {
                    return false;
                }
                let mut theta = libm::atan2(dy, dx) - start;
                while theta < 0.0 {
                    theta += 2.0 * PI;
                }
                theta <= *span
            }
            Shape::Ellipsoid { c, semi, angle } => {
                let (s, co) = (libm::sin(*angle), libm::cos(*angle));
                let (d0, d1) = (p[0] - c[0], p[1] - c[1]);
                let u = co * d0 + s * d1;
                let v = -s * d0 + co * d1;
                let sq = |x: f64| x * x;
                let mut q = sq(u / semi[0]) + sq(v / semi[1]);
                for a in 2..p.len() {
                    q += sq((p[a] - c[a]) / semi[a]);
                }
                q <= 1.0
            }
        }
    }
}

/// Separable Gaussian filter with clamped borders.
pub fn gaussian_blur(data: &[f64], size: &[usize], sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let half = libm::ceil(3.0 * sigma) as i64;
    let mut kernel: Vec<f64> = (-half..=half)
        .map(|k| libm::exp(-((k * k) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let total: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= total;
    }
    let mut cur = data.to_vec();
    let mut next = vec![0.0; data.len()];
    for axis in 0..size.len() {
        let stride: usize = size[axis + 1..].iter().product();
        let n = size[axis] as i64;
        for (i, out) in next.iter_mut().enumerate() {
            let pos = ((i / stride) % size[axis]) as i64;
            let base = i - pos as usize * stride;
            *out = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| {
                    let q = (pos + k as i64 - half).clamp(0, n - 1) as usize;
                    w * cur[base + q * stride]
                })
                .sum();
        }
        core::mem::swap(&mut cur, &mut next);
    }
    cur
}
