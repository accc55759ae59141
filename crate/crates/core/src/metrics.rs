//! Overlap and surface-distance metrics for binary segmentations on a
//! regular grid with physical voxel spacing.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Default distance (mm) under which a surface point counts as overlapping.
pub const DEFAULT_SO_TOLERANCE: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    shape: Vec<usize>,
    data: Vec<bool>,
    spacing: Vec<f64>,
}

impl BinaryMask {
    pub fn new(shape: &[usize], data: Vec<bool>, spacing: &[f64]) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidShape {
                op: "binary_mask",
                shape: shape.to_vec(),
                reason: "extents must be positive and match the data length",
            });
        }
        if spacing.len() != shape.len() || spacing.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::invalid("binary_mask", "spacing must be positive, one value per axis"));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            spacing: spacing.to_vec(),
        })
    }

    /// Foreground wherever `labels[i] == class`.
    pub fn from_labels(shape: &[usize], labels: &[usize], class: usize, spacing: &[f64]) -> Result<Self> {
        Self::new(shape, labels.iter().map(|l| *l == class).collect(), spacing)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn with_spacing(&self, spacing: &[f64]) -> Result<Self> {
        Self::new(&self.shape, self.data.clone(), spacing)
    }

    fn index_of(&self, coord: &[usize]) -> usize {
        coord.iter().zip(&self.shape).fold(0, |acc, (c, s)| acc * s + c)
    }

    /// Foreground cells with at least one face neighbour in the background.
    /// Cells on the grid border count their outside faces as background.
    pub fn surface_cells(&self) -> Vec<Vec<usize>> {
        let rank = self.shape.len();
        let mut out = Vec::new();
        let mut coord = vec![0usize; rank];
        for i in 0..self.data.len() {
            if i > 0 {
                advance(&mut coord, &self.shape);
            }
            if !self.data[i] {
                continue;
            }
            let boundary = (0..rank).any(|a| {
                if coord[a] == 0 || coord[a] + 1 == self.shape[a] {
                    return true;
                }
                let mut n = coord.clone();
                n[a] -= 1;
                let lo = self.data[self.index_of(&n)];
                n[a] += 2;
                let hi = self.data[self.index_of(&n)];
                !(lo && hi)
            });
            if boundary {
                out.push(coord.clone());
            }
        }
        out
    }

    /// Surface cell centres in millimetres.
    pub fn surface_points(&self) -> Vec<Vec<f64>> {
        self.surface_cells()
            .into_iter()
            .map(|c| c.iter().zip(&self.spacing).map(|(i, s)| *i as f64 * s).collect())
            .collect()
    }
}

fn advance(coord: &mut [usize], shape: &[usize]) {
    for a in (0..coord.len()).rev() {
        coord[a] += 1;
        if coord[a] < shape[a] {
            return;
        }
        coord[a] = 0;
    }
}

fn check_same_grid(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op: "metrics",
            expected: a.shape.clone(),
            got: b.shape.clone(),
        });
    }
    if a.spacing != b.spacing {
        return Err(Error::invalid("metrics", "masks have different spacing"));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Overlap {
    pub dsc: f64,
    pub iou: f64,
    /// Mean of foreground and background IoU.
    pub miou: f64,
    pub acc: f64,
}

pub fn overlap_metrics(pred: &BinaryMask, gt: &BinaryMask) -> Result<Overlap> {
    check_same_grid(pred, gt)?;
    let (mut tp, mut fp, mut fne, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (p, g) in pred.data.iter().zip(&gt.data) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            (false, false) => tn += 1,
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    let iou = ratio(tp, tp + fp + fne);
    let bg_iou = ratio(tn, tn + fp + fne);
    Ok(Overlap {
        dsc: ratio(2 * tp, 2 * tp + fp + fne),
        iou,
        miou: 0.5 * (iou + bg_iou),
        acc: ratio(tp + tn, pred.data.len()),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceDistances {
    /// Exact Hausdorff distance, mm.
    pub hd: f64,
    /// Mean of the two directed mean surface distances, mm.
    pub assd: f64,
    /// Mean over both directions of the fraction of surface points within
    /// tolerance of the other surface.
    pub so: f64,
}

pub fn surface_metrics(pred: &BinaryMask, gt: &BinaryMask, tolerance_mm: f64) -> Result<SurfaceDistances> {
    check_same_grid(pred, gt)?;
    if !(tolerance_mm >= 0.0) {
        return Err(Error::invalid("surface_metrics", "tolerance must be non-negative"));
    }
    if pred.count() == 0 || gt.count() == 0 {
        return Err(Error::EmptyMask);
    }
    let a = pred.surface_points();
    let b = gt.surface_points();
    let ab = directed(&a, &b);
    let ba = directed(&b, &a);
    let stats = |d: &[f64]| {
        let max = d.iter().copied().fold(0.0, f64::max);
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let within = d.iter().filter(|v| **v <= tolerance_mm).count() as f64 / d.len() as f64;
        (max, mean, within)
    };
    let (max_ab, mean_ab, so_ab) = stats(&ab);
    let (max_ba, mean_ba, so_ba) = stats(&ba);
    Ok(SurfaceDistances {
        hd: max_ab.max(max_ba),
        assd: (mean_ab + mean_ba) / 2.0,
        so: (so_ab + so_ba) / 2.0,
    })
}

/// `sum_i (a_i - b_i)^2`, accumulated in axis order.
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Distance from every point of `from` to its nearest point in `to`.
/// Candidates are swept outward in order of the first coordinate and the
/// sweep stops once that coordinate alone exceeds the best distance.
fn directed(from: &[Vec<f64>], to: &[Vec<f64>]) -> Vec<f64> {
    let mut sorted: Vec<&Vec<f64>> = to.iter().collect();
    sorted.sort_by(|p, q| p[0].total_cmp(&q[0]));
    let keys: Vec<f64> = sorted.iter().map(|p| p[0]).collect();
    from.iter()
        .map(|p| {
            let start = keys.partition_point(|k| *k < p[0]);
            let mut best = f64::INFINITY;
            for q in sorted[start..].iter() {
                let d0 = q[0] - p[0];
                if d0 * d0 > best {
                    break;
                }
                best = best.min(squared_distance(p, q));
            }
            for q in sorted[..start].iter().rev() {
                let d0 = p[0] - q[0];
                if d0 * d0 > best {
                    break;
                }
                best = best.min(squared_distance(p, q));
            }
            libm::sqrt(best)
        })
        .collect()
}

/// All metrics for one sample. Surface metrics are `None` when either mask
/// is empty.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub overlap: Overlap,
    pub surface: Option<SurfaceDistances>,
}

pub fn evaluate_masks(pred: &BinaryMask, gt: &BinaryMask, tolerance_mm: f64) -> Result<MetricReport> {
    let overlap = overlap_metrics(pred, gt)?;
    let surface = match surface_metrics(pred, gt, tolerance_mm) {
        Ok(s) => Some(s),
        Err(Error::EmptyMask) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricReport { overlap, surface })
}
