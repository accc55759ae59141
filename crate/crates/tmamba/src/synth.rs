//! Writes a synthetic dataset with its manifest.

use std::fs;
use std::path::{Path, PathBuf};

use tmamba_core::data::{synth_generate, SegSample};

use crate::config::RunConfig;
use crate::manifest::{save_samples, write_manifest};
use crate::tensorfile::io_err;
use crate::Error;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Train, val and test samples, generated at consecutive indices in that
/// order.
pub fn generate_splits(cfg: &RunConfig) -> Result<[Vec<SegSample>; 3], Error> {
    let (a, b, c) = (cfg.synth_train, cfg.synth_val, cfg.synth_test);
    Ok([
        synth_generate(&cfg.synth, 0, a)?,
        synth_generate(&cfg.synth, a as u64, b)?,
        synth_generate(&cfg.synth, (a + b) as u64, c)?,
    ])
}

/// Generates the splits into `dir` and returns the manifest path.
pub fn write_dataset(cfg: &RunConfig, dir: &Path) -> Result<PathBuf, Error> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let splits = generate_splits(cfg)?;
    let mut tagged = Vec::new();
    for (name, samples) in ["train", "val", "test"].iter().zip(&splits) {
        tagged.extend(samples.iter().map(|s| (*name, s)));
    }
    let records = save_samples(dir, &tagged)?;
    let path = dir.join(MANIFEST_FILE);
    write_manifest(&path, &records)?;
    Ok(path)
}
