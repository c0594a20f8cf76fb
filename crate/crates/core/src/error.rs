use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("layer `{layer}`: {reason}")]
    Graph { layer: String, reason: String },

    #[error("layer `{layer}`: missing weight `{name}`")]
    MissingWeight { layer: String, name: String },

    #[error("layer `{layer}`: weight `{name}` has shape {actual:?}, expected {expected:?}")]
    WeightShape {
        layer: String,
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error(transparent)]
    WeightFile(#[from] WeightFileError),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Failures when decoding a serialized [`crate::WeightStore`]. Each corruption
/// class maps to its own variant so callers can report it precisely.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum WeightFileError {
    #[error("bad magic {found:?}, expected \"WLDW\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("tensor name is not valid UTF-8")]
    InvalidName,
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("tensor `{name}` has invalid dims {dims:?}")]
    InvalidDims { name: String, dims: Vec<usize> },
    #[error("tensor name `{0}` longer than 65535 bytes")]
    NameTooLong(String),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            reason: reason.into(),
        }
    }

    pub(crate) fn graph(layer: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Graph {
            layer: layer.into(),
            reason: reason.into(),
        }
    }
}
