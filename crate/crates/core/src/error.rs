use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("unsupported datatype: {0}")]
    UnsupportedDatatype(String),

    #[error("invalid spacing: {0:?}")]
    InvalidSpacing([f64; 3]),

    #[error("non-orthonormal direction matrix")]
    NonOrthonormalDirection,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("mixed orientations in slice stack")]
    MixedOrientations,

    #[error("missing slice indices: {0:?}")]
    MissingSlices(Vec<usize>),

    #[error("label {0} is not in the vocabulary")]
    UnknownLabel(u16),

    #[error("non-binary input: {0}")]
    NonBinary(String),

    #[error("singular affine transform")]
    SingularTransform,

    #[error("optimizer diverged at level {level}, iteration {iteration}: metric {metric}")]
    Diverged {
        level: usize,
        iteration: usize,
        metric: f64,
    },

    #[error("undefined surface: mask is empty")]
    EmptySurface,

    #[error("atlas selection failed: {0}")]
    AtlasSelection(String),

    #[error("under-prompted slice: no atlas label covers the target")]
    UnderPrompt,

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
