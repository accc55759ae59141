//! Spectral inspection: magnitude spectra before and after the band mask
//! and the reconstructed signal, per channel.

use std::fs;
use std::path::Path;

use tmamba_core::freq::{bandpass_mask, filter_signal_masked, BandKind, BandMask, FreqBranchParams};
use tmamba_core::numcore::{next_pow2, Tensor};

use crate::tensorfile::{io_err, write_tensorfile, TensorFile};
use crate::Error;

/// Band selection of the filter command; `All` keeps every bin.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterBand {
    All,
    Kind(BandKind),
}

impl std::str::FromStr for FilterBand {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        if s == "all" {
            return Ok(FilterBand::All);
        }
        s.parse::<BandKind>()
            .map(FilterBand::Kind)
            .map_err(|_| Error::Usage(format!("unknown band {s:?}, expected low, band, high or all")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterOutput {
    /// `(C, n)` magnitudes over the padded spectrum.
    pub pre_mask: Tensor,
    pub post_mask: Tensor,
    /// `(C, L)`.
    pub reconstructed: Tensor,
    pub kept_bins: Vec<usize>,
}

/// Filters every row of a `(C, L)` (or `(L,)`) signal with unit spectral
/// weights through the selected band.
pub fn filter(input: &Tensor, band: FilterBand, s_low: f64, s_high: f64) -> Result<FilterOutput, Error> {
    let (c, l) = match input.shape() {
        [l] => (1, *l),
        [c, l] => (*c, *l),
        s => return Err(Error::Data(format!("filter input must be (L) or (C, L), got {s:?}"))),
    };
    if c == 0 || l == 0 {
        return Err(Error::Data("filter input is empty".into()));
    }
    let kind = match band {
        FilterBand::Kind(k) => k,
        FilterBand::All => BandKind::Low,
    };
    let params = FreqBranchParams::new(c, l, kind, s_low, s_high)?;
    let n = next_pow2(l);
    let mask = match band {
        FilterBand::All => BandMask::all_pass(n),
        FilterBand::Kind(k) => bandpass_mask(n, k, s_low, s_high)?,
    };
    let (mut pre, mut post, mut rec) = (Vec::new(), Vec::new(), Vec::new());
    for (ch, row) in input.data().chunks_exact(l).enumerate() {
        let f = filter_signal_masked(row, &params, ch, &mask)?;
        pre.extend(f.pre_mask);
        post.extend(f.post_mask);
        rec.extend(f.reconstructed);
    }
    Ok(FilterOutput {
        pre_mask: Tensor::new(&[c, n], pre)?,
        post_mask: Tensor::new(&[c, n], post)?,
        reconstructed: Tensor::new(&[c, l], rec)?,
        kept_bins: mask.kept(),
    })
}

/// Binary graymap of one channel: the pre-mask spectrum on the upper half,
/// the post-mask spectrum on the lower half, both scaled by the pre-mask peak.
pub fn spectrum_pgm(out: &FilterOutput, channel: usize) -> Vec<u8> {
    const BAND_ROWS: usize = 16;
    let n = out.pre_mask.shape()[1];
    let pre = &out.pre_mask.data()[channel * n..(channel + 1) * n];
    let post = &out.post_mask.data()[channel * n..(channel + 1) * n];
    let peak = pre.iter().copied().fold(0.0, f64::max);
    let level = |v: f64| if peak > 0.0 { (255.0 * v / peak).round().clamp(0.0, 255.0) as u8 } else { 0 };
    let mut img = format!("P5\n{n} {}\n255\n", 2 * BAND_ROWS).into_bytes();
    for row in [pre, post] {
        let line: Vec<u8> = row.iter().map(|v| level(*v)).collect();
        for _ in 0..BAND_ROWS {
            img.extend_from_slice(&line);
        }
    }
    img
}

/// Writes `spectra.tmtn` and one `channel{c}.pgm` per channel into `dir`.
pub fn write_filter_output(dir: &Path, out: &FilterOutput) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut f = TensorFile::new();
    f.insert_tensor("pre_mask", &out.pre_mask);
    f.insert_tensor("post_mask", &out.post_mask);
    f.insert_tensor("reconstructed", &out.reconstructed);
    let kept: Vec<i32> = out.kept_bins.iter().map(|k| *k as i32).collect();
    f.insert("kept_bins", crate::tensorfile::Entry::i32(&[kept.len()], kept));
    write_tensorfile(&dir.join("spectra.tmtn"), &f)?;
    for c in 0..out.pre_mask.shape()[0] {
        let p = dir.join(format!("channel{c}.pgm"));
        fs::write(&p, spectrum_pgm(out, c)).map_err(|e| io_err(&p, e))?;
    }
    Ok(())
}
