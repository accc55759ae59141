use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("length {0} is not a power of two")]
    NotPowerOfTwo(usize),
    #[error("{op}: invalid argument: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("backward already ran on this graph; call reset() first")]
    BackwardTwice,
    #[error("backward needs a scalar output or an explicit seed, output shape is {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("imaginary residue {0:e} after inverse transform exceeds tolerance")]
    ImaginaryResidue(f64),
    #[error("unknown band kind `{0}`")]
    InvalidBand(String),
    #[error("mask is empty, surface metric undefined")]
    EmptyMask,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: i64, classes: usize },
}

impl Error {
    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            reason: reason.into(),
        }
    }
}
