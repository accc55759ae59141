use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tmamba_core::metrics::{
    evaluate_masks, overlap_metrics, surface_metrics, BinaryMask, DEFAULT_SO_TOLERANCE,
};
use tmamba_core::Error;

/// Pads the grid with background and checks every face neighbour.
fn oracle_surface(m: &BinaryMask) -> Vec<Vec<f64>> {
    let shape = m.shape();
    let rank = shape.len();
    let n: usize = shape.iter().product();
    let coord_of = |mut i: usize| {
        let mut c = vec![0i64; rank];
        for a in (0..rank).rev() {
            c[a] = (i % shape[a]) as i64;
            i /= shape[a];
        }
        c
    };
    let at = |c: &[i64]| -> bool {
        if c.iter().zip(shape).any(|(v, s)| *v < 0 || *v >= *s as i64) {
            return false;
        }
        let i = c.iter().zip(shape).fold(0usize, |acc, (v, s)| acc * s + *v as usize);
        m.data()[i]
    };
    let mut pts = Vec::new();
    for i in 0..n {
        let c = coord_of(i);
        if !at(&c) {
            continue;
        }
        let mut edge = false;
        for a in 0..rank {
            for d in [-1i64, 1] {
                let mut nb = c.clone();
                nb[a] += d;
                edge |= !at(&nb);
            }
        }
        if edge {
            pts.push(c.iter().zip(m.spacing()).map(|(v, s)| *v as f64 * s).collect());
        }
    }
    pts
}

/// Brute-force pairwise distances: (hd, assd, so).
fn oracle_surface_metrics(a: &BinaryMask, b: &BinaryMask, tol: f64) -> (f64, f64, f64) {
    let (pa, pb) = (oracle_surface(a), oracle_surface(b));
    let directed = |from: &[Vec<f64>], to: &[Vec<f64>]| -> Vec<f64> {
        from.iter()
            .map(|p| {
                let mut best = f64::INFINITY;
                for q in to {
                    let d: f64 = p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum();
                    if d < best {
                        best = d;
                    }
                }
                best.sqrt()
            })
            .collect()
    };
    let (ab, ba) = (directed(&pa, &pb), directed(&pb, &pa));
    let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let frac = |v: &[f64]| v.iter().filter(|d| **d <= tol).count() as f64 / v.len() as f64;
    (
        max(&ab).max(max(&ba)),
        (mean(&ab) + mean(&ba)) / 2.0,
        (frac(&ab) + frac(&ba)) / 2.0,
    )
}

fn random_mask(r: &mut ChaCha8Rng, shape: &[usize], spacing: &[f64], density: f64) -> BinaryMask {
    let n: usize = shape.iter().product();
    let mut data: Vec<bool> = (0..n).map(|_| r.random_bool(density)).collect();
    if !data.iter().any(|v| *v) {
        data[r.random_range(0..n)] = true;
    }
    BinaryMask::new(shape, data, spacing).unwrap()
}

fn box_mask(shape: &[usize], lo: &[usize], hi: &[usize], spacing: &[f64]) -> BinaryMask {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|mut i| {
            let mut inside = true;
            for a in (0..shape.len()).rev() {
                let c = i % shape[a];
                i /= shape[a];
                inside &= lo[a] <= c && c < hi[a];
            }
            inside
        })
        .collect();
    BinaryMask::new(shape, data, spacing).unwrap()
}

#[test]
fn identical_masks() {
    let m = box_mask(&[8, 8], &[2, 2], &[6, 5], &[1.0, 1.0]);
    let o = overlap_metrics(&m, &m).unwrap();
    assert_eq!((o.dsc, o.iou, o.acc, o.miou), (1.0, 1.0, 1.0, 1.0));
    let s = surface_metrics(&m, &m, DEFAULT_SO_TOLERANCE).unwrap();
    assert_eq!((s.hd, s.assd, s.so), (0.0, 0.0, 1.0));
}

#[test]
fn disjoint_masks() {
    let a = box_mask(&[8, 8], &[0, 0], &[3, 3], &[1.0, 1.0]);
    let b = box_mask(&[8, 8], &[5, 5], &[8, 8], &[1.0, 1.0]);
    let o = overlap_metrics(&a, &b).unwrap();
    assert_eq!((o.dsc, o.iou), (0.0, 0.0));
}

#[test]
fn half_overlapping_squares() {
    let a = box_mask(&[8, 8], &[0, 0], &[4, 4], &[1.0, 1.0]);
    let b = box_mask(&[8, 8], &[0, 2], &[4, 6], &[1.0, 1.0]);
    let o = overlap_metrics(&a, &b).unwrap();
    // 8 shared pixels, 24 in the union
    assert!((o.iou - 1.0 / 3.0).abs() < 1e-15);
    assert!((o.dsc - 0.5).abs() < 1e-15);
    assert!((o.acc - 48.0 / 64.0).abs() < 1e-15);
}

#[test]
fn both_empty_masks_count_as_perfect_overlap() {
    let e = BinaryMask::new(&[4, 4], vec![false; 16], &[1.0, 1.0]).unwrap();
    let o = overlap_metrics(&e, &e).unwrap();
    assert_eq!((o.dsc, o.iou, o.miou, o.acc), (1.0, 1.0, 1.0, 1.0));
    assert_eq!(surface_metrics(&e, &e, 1.0), Err(Error::EmptyMask));
    let r = evaluate_masks(&e, &e, 1.0).unwrap();
    assert!(r.surface.is_none());
}

#[test]
fn offset_cubes_in_3d() {
    let sp = [0.5, 0.5, 0.5];
    let a = box_mask(&[10, 4, 4], &[1, 1, 1], &[2, 2, 2], &sp);
    let b = box_mask(&[10, 4, 4], &[4, 1, 1], &[5, 2, 2], &sp);
    let s = surface_metrics(&a, &b, 1.0).unwrap();
    assert_eq!(s.hd, 1.5);
    assert_eq!(s.assd, 1.5);
    assert_eq!(s.so, 0.0);
    let (hd, _, _) = oracle_surface_metrics(&a, &b, 1.0);
    assert_eq!(hd, 1.5);

    let a = box_mask(&[12, 6, 6], &[1, 1, 1], &[4, 4, 4], &sp);
    let b = box_mask(&[12, 6, 6], &[4, 1, 1], &[7, 4, 4], &sp);
    assert_eq!(surface_metrics(&a, &b, 1.0).unwrap().hd, 1.5);
}

#[test]
fn mismatched_grids_are_rejected() {
    let a = box_mask(&[4, 4], &[0, 0], &[2, 2], &[1.0, 1.0]);
    let b = box_mask(&[4, 5], &[0, 0], &[2, 2], &[1.0, 1.0]);
    let c = a.with_spacing(&[1.0, 2.0]).unwrap();
    assert!(matches!(overlap_metrics(&a, &b), Err(Error::ShapeMismatch { .. })));
    assert!(overlap_metrics(&a, &c).is_err());
    assert!(surface_metrics(&a, &c, 1.0).is_err());
    assert!(BinaryMask::new(&[2, 2], vec![true; 4], &[1.0, 0.0]).is_err());
    assert!(BinaryMask::new(&[2, 2], vec![true; 3], &[1.0, 1.0]).is_err());
}

#[test]
fn interior_cells_are_not_surface() {
    let m = box_mask(&[5, 5], &[0, 0], &[5, 5], &[1.0, 1.0]);
    assert_eq!(m.surface_cells().len(), 16);
    let m = box_mask(&[5, 5, 5], &[1, 1, 1], &[4, 4, 4], &[1.0, 1.0, 1.0]);
    assert_eq!(m.surface_cells().len(), 26);
}

#[test]
fn random_pairs_match_brute_force() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    for i in 0..100 {
        let (shape, spacing) = if i % 2 == 0 {
            let s = vec![r.random_range(1..=16), r.random_range(1..=16)];
            (s, vec![r.random_range(0.2..2.0), r.random_range(0.2..2.0)])
        } else {
            let s = vec![r.random_range(1..=8), r.random_range(1..=8), r.random_range(1..=8)];
            (s, vec![r.random_range(0.2..2.0), r.random_range(0.2..2.0), r.random_range(0.2..2.0)])
        };
        let density = r.random_range(0.05..0.7);
        let a = random_mask(&mut r, &shape, &spacing, density);
        let b = random_mask(&mut r, &shape, &spacing, density);
        let s = surface_metrics(&a, &b, DEFAULT_SO_TOLERANCE).unwrap();
        let (hd, assd, so) = oracle_surface_metrics(&a, &b, DEFAULT_SO_TOLERANCE);
        assert_eq!((s.hd, s.assd, s.so), (hd, assd, so), "case {i} {shape:?}");
        let o = overlap_metrics(&a, &b).unwrap();
        assert!((o.dsc - 2.0 * o.iou / (1.0 + o.iou)).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn surface_metrics_are_symmetric(seed in any::<u64>(), three in any::<bool>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let shape = if three { vec![6, 5, 4] } else { vec![12, 9] };
        let spacing: Vec<f64> = shape.iter().map(|_| r.random_range(0.3..1.7)).collect();
        let a = random_mask(&mut r, &shape, &spacing, 0.3);
        let b = random_mask(&mut r, &shape, &spacing, 0.3);
        let ab = surface_metrics(&a, &b, 1.0).unwrap();
        let ba = surface_metrics(&b, &a, 1.0).unwrap();
        prop_assert_eq!(ab, ba);
        let oab = overlap_metrics(&a, &b).unwrap();
        let oba = overlap_metrics(&b, &a).unwrap();
        prop_assert_eq!(oab, oba);
    }

    #[test]
    fn doubling_spacing_doubles_distances(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let shape = [10, 7];
        let spacing = [r.random_range(0.3..1.7), r.random_range(0.3..1.7)];
        let a = random_mask(&mut r, &shape, &spacing, 0.25);
        let b = random_mask(&mut r, &shape, &spacing, 0.25);
        let wide = [2.0 * spacing[0], 2.0 * spacing[1]];
        let (a2, b2) = (a.with_spacing(&wide).unwrap(), b.with_spacing(&wide).unwrap());
        let s = surface_metrics(&a, &b, 1.0).unwrap();
        let s2 = surface_metrics(&a2, &b2, 1.0).unwrap();
        prop_assert_eq!(s2.hd, 2.0 * s.hd);
        prop_assert!((s2.assd - 2.0 * s.assd).abs() <= 1e-12 * s.assd.max(1.0));
        prop_assert_eq!(overlap_metrics(&a, &b).unwrap(), overlap_metrics(&a2, &b2).unwrap());
    }

    #[test]
    fn dice_and_iou_agree(seed in any::<u64>(), density in 0.0f64..1.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let a = random_mask(&mut r, &[9, 9], &[1.0, 1.0], density);
        let b = random_mask(&mut r, &[9, 9], &[1.0, 1.0], density);
        let o = overlap_metrics(&a, &b).unwrap();
        prop_assert!((o.dsc - 2.0 * o.iou / (1.0 + o.iou)).abs() <= 1e-12);
        for v in [o.dsc, o.iou, o.miou, o.acc] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
