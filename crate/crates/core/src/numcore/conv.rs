//! Direct N-d (N <= 3) convolution kernels over `(batch, channel, spatial...)`
//! buffers. Lower ranks are lifted to 3-d with unit extents.

use alloc::vec;
use alloc::vec::Vec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geom3 {
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl Geom3 {
    /// Lifts per-axis parameters of a rank-`r` convolution to three axes.
    pub fn lift(
        input: &[usize],
        kernel: &[usize],
        stride: &[usize],
        pad: &[usize],
    ) -> Option<Self> {
        let r = input.len();
        if r == 0 || r > 3 || kernel.len() != r || stride.len() != r || pad.len() != r {
            return None;
        }
        let mut g = Geom3 {
            input: [1; 3],
            output: [1; 3],
            kernel: [1; 3],
            stride: [1; 3],
            pad: [0; 3],
        };
        let off = 3 - r;
        for i in 0..r {
            if stride[i] == 0 || input[i] + 2 * pad[i] < kernel[i] {
                return None;
            }
            g.input[off + i] = input[i];
            g.kernel[off + i] = kernel[i];
            g.stride[off + i] = stride[i];
            g.pad[off + i] = pad[i];
            g.output[off + i] = (input[i] + 2 * pad[i] - kernel[i]) / stride[i] + 1;
        }
        Some(g)
    }

    pub fn in_size(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_size(&self) -> usize {
        self.output.iter().product()
    }

    pub fn k_size(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Output positions `o` along `axis` for which kernel tap `k` lands inside the input.
    fn valid(&self, axis: usize, k: usize) -> (usize, usize) {
        let (s, p, i, o) = (
            self.stride[axis],
            self.pad[axis],
            self.input[axis],
            self.output[axis],
        );
        let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
        if i + p < k + 1 {
            return (0, 0);
        }
        let hi = ((i - 1 + p - k) / s + 1).min(o);
        (lo.min(hi), hi)
    }
}

/// Visits every (output offset, input offset) row pair for one kernel tap,
/// handing the closure the x-extent of valid outputs.
#[inline]
fn for_each_row(
    g: &Geom3,
    kz: usize,
    ky: usize,
    kx: usize,
    mut f: impl FnMut(usize, usize, usize, usize),
) {
    let (z0, z1) = g.valid(0, kz);
    let (y0, y1) = g.valid(1, ky);
    let (x0, x1) = g.valid(2, kx);
    if x0 >= x1 {
        return;
    }
    let [_, oy_n, ox_n] = g.output;
    let [_, iy_n, ix_n] = g.input;
    for oz in z0..z1 {
        let iz = oz * g.stride[0] + kz - g.pad[0];
        for oy in y0..y1 {
            let iy = oy * g.stride[1] + ky - g.pad[1];
            let orow = (oz * oy_n + oy) * ox_n;
            let irow = (iz * iy_n + iy) * ix_n;
            f(orow, irow, x0, x1);
        }
    }
}

pub(crate) fn forward(
    x: &[f64],
    w: &[f64],
    batch: usize,
    cin: usize,
    cout: usize,
    g: &Geom3,
) -> Vec<f64> {
    let (isz, osz, ksz) = (g.in_size(), g.out_size(), g.k_size());
    let [_, ky_n, kx_n] = g.kernel;
    let (sx, px) = (g.stride[2], g.pad[2]);
    let mut y = vec![0.0; batch * cout * osz];
    for b in 0..batch {
        for co in 0..cout {
            let out = &mut y[(b * cout + co) * osz..][..osz];
            for ci in 0..cin {
                let xin = &x[(b * cin + ci) * isz..][..isz];
                let wk = &w[(co * cin + ci) * ksz..][..ksz];
                for kz in 0..g.kernel[0] {
                    for ky in 0..ky_n {
                        for kx in 0..kx_n {
                            let wv = wk[(kz * ky_n + ky) * kx_n + kx];
                            for_each_row(g, kz, ky, kx, |orow, irow, x0, x1| {
                                let o = &mut out[orow + x0..orow + x1];
                                if sx == 1 {
                                    let i = &xin[irow + x0 + kx - px..][..x1 - x0];
                                    for (ov, iv) in o.iter_mut().zip(i) {
                                        *ov += wv * iv;
                                    }
                                } else {
                                    for (j, ov) in o.iter_mut().enumerate() {
                                        *ov += wv * xin[irow + (x0 + j) * sx + kx - px];
                                    }
                                }
                            });
                        }
                    }
                }
            }
        }
    }
    y
}

/// Returns `(dx, dw)`; either may be skipped.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    batch: usize,
    cin: usize,
    cout: usize,
    g: &Geom3,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (isz, osz, ksz) = (g.in_size(), g.out_size(), g.k_size());
    let [_, ky_n, kx_n] = g.kernel;
    let (sx, px) = (g.stride[2], g.pad[2]);
    let mut dx = need_dx.then(|| vec![0.0; x.len()]);
    let mut dw = need_dw.then(|| vec![0.0; w.len()]);
    for b in 0..batch {
        for co in 0..cout {
            let gout = &dy[(b * cout + co) * osz..][..osz];
            for ci in 0..cin {
                let xoff = (b * cin + ci) * isz;
                let woff = (co * cin + ci) * ksz;
                for kz in 0..g.kernel[0] {
                    for ky in 0..ky_n {
                        for kx in 0..kx_n {
                            let widx = woff + (kz * ky_n + ky) * kx_n + kx;
                            let wv = w[widx];
                            let mut acc = 0.0;
                            for_each_row(g, kz, ky, kx, |orow, irow, x0, x1| {
                                let go = &gout[orow + x0..orow + x1];
                                if sx == 1 {
                                    let base = xoff + irow + x0 + kx - px;
                                    if let Some(dx) = dx.as_mut() {
                                        for (d, gv) in dx[base..base + go.len()].iter_mut().zip(go)
                                        {
                                            *d += wv * gv;
                                        }
                                    }
                                    if need_dw {
                                        for (xv, gv) in x[base..base + go.len()].iter().zip(go) {
                                            acc += xv * gv;
                                        }
                                    }
                                } else {
                                    for (j, gv) in go.iter().enumerate() {
                                        let ix = xoff + irow + (x0 + j) * sx + kx - px;
                                        if let Some(dx) = dx.as_mut() {
                                            dx[ix] += wv * gv;
                                        }
                                        acc += x[ix] * gv;
                                    }
                                }
                            });
                            if let Some(dw) = dw.as_mut() {
                                dw[widx] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}
