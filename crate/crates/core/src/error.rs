use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("label {label} out of range (classes = {classes}) at sample {sample}, row {row}, col {col}")]
    LabelOutOfRange {
        label: u8,
        classes: usize,
        sample: usize,
        row: usize,
        col: usize,
    },

    #[error("loss became NaN at epoch {epoch}, batch {batch} (samples {samples:?})")]
    NanLoss {
        epoch: usize,
        batch: usize,
        samples: Vec<String>,
    },

    #[error("dataset error: {0}")]
    Data(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes {found:?}, expected \"MPDC\"")]
    BadMagic { found: Vec<u8> },

    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("truncated checkpoint: needed {needed} bytes, file has {available}")]
    Truncated { needed: usize, available: usize },

    #[error("payload length mismatch: header declares {declared} bytes, file carries {actual}")]
    PayloadMismatch { declared: usize, actual: usize },

    #[error("tensor {name}: {reason}")]
    Tensor { name: String, reason: String },

    #[error("malformed header: {0}")]
    Header(String),
}

impl Error {
    pub(crate) fn shape(left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn invalid_shape(shape: &[usize], reason: impl Into<String>) -> Self {
        Error::InvalidShape {
            shape: shape.to_vec(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
