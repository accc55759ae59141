//! Line-delimited JSON dataset manifests and the per-sample files they
//! point to.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tmamba_core::data::SegSample;

use crate::tensorfile::{io_err, read_tensorfile, write_tensorfile, Entry, FormatError, TensorFile};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    /// Relative paths resolve against the manifest's directory.
    pub image_path: String,
    pub mask_path: String,
    pub spacing: Vec<f64>,
    /// "train", "val" or "test".
    pub split: String,
}

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("sample {id:?}: {reason}")]
    Sample { id: String, reason: String },
    #[error(transparent)]
    Format(#[from] FormatError),
}

pub type Result<T> = std::result::Result<T, ManifestError>;

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| ManifestError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("manifest records serialize");
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&buf).map_err(|e| io_err(path, e))?;
    Ok(())
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads the image (entry "image", f64 `(1, *S)`) and mask (entry "mask",
/// u8 `(*S)`) of one record.
pub fn load_sample(base: &Path, rec: &ManifestRecord) -> Result<SegSample> {
    let bad = |reason: String| ManifestError::Sample {
        id: rec.id.clone(),
        reason,
    };
    let image = read_tensorfile(&resolve(base, &rec.image_path))?.tensor("image")?;
    let mf = read_tensorfile(&resolve(base, &rec.mask_path))?;
    let mask_entry = mf.get("mask")?;
    let mask = mf.bytes("mask")?.to_vec();
    if image.shape().first() != Some(&1) || image.shape()[1..] != mask_entry.shape[..] {
        return Err(bad(format!(
            "image shape {:?} does not match mask shape {:?}",
            image.shape(),
            mask_entry.shape
        )));
    }
    if rec.spacing.len() != mask_entry.shape.len() || rec.spacing.iter().any(|s| !(*s > 0.0)) {
        return Err(bad(format!("spacing {:?} is invalid for rank {}", rec.spacing, mask_entry.shape.len())));
    }
    if mask.iter().any(|m| *m > 1) {
        return Err(bad("mask labels must be 0 or 1".into()));
    }
    Ok(SegSample {
        id: rec.id.clone(),
        image,
        mask,
        spacing: rec.spacing.clone(),
    })
}

/// Loads every record of the manifest, keeping its split tag.
pub fn load_dataset(path: &Path) -> Result<Vec<(String, SegSample)>> {
    let base = path.parent().unwrap_or(Path::new("."));
    read_manifest(path)?
        .iter()
        .map(|r| Ok((r.split.clone(), load_sample(base, r)?)))
        .collect()
}

/// Writes samples under `dir/images` and `dir/masks` and returns their
/// records with paths relative to `dir`.
pub fn save_samples(dir: &Path, samples: &[(&str, &SegSample)]) -> Result<Vec<ManifestRecord>> {
    let mut out = Vec::with_capacity(samples.len());
    for (split, s) in samples {
        let image_path = format!("images/{}.tmtn", s.id);
        let mask_path = format!("masks/{}.tmtn", s.id);
        let mut img = TensorFile::new();
        img.insert_tensor("image", &s.image);
        write_tensorfile(&dir.join(&image_path), &img)?;
        let mut m = TensorFile::new();
        m.insert("mask", Entry::u8(s.size(), s.mask.clone()));
        write_tensorfile(&dir.join(&mask_path), &m)?;
        out.push(ManifestRecord {
            id: s.id.clone(),
            image_path,
            mask_path,
            spacing: s.spacing.clone(),
            split: split.to_string(),
        });
    }
    Ok(out)
}
