//! File formats, training, evaluation and the command-line operations built
//! on `tmamba-core`.

pub mod bench;
pub mod config;
pub mod eval;
pub mod gradcheck;
pub mod inspect;
pub mod manifest;
pub mod synth;
pub mod tensorfile;
pub mod trainer;

pub use config::{ConfigError, RunConfig};
pub use manifest::ManifestError;
pub use tensorfile::FormatError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("file format error: {0}")]
    Format(#[from] FormatError),
    #[error("manifest error: {0}")]
    Manifest(#[from] ManifestError),
    #[error("model error: {0}")]
    Model(#[from] tmamba_core::Error),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl Error {
    /// Process exit status for this error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::CheckFailed(_) => 1,
            Error::Usage(_) => 2,
            Error::Config(_) => 3,
            Error::Format(_) | Error::Manifest(_) | Error::Checkpoint(_) => 4,
            Error::Data(_) | Error::Model(_) => 5,
        }
    }
}
