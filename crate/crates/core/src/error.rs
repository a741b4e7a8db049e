use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = ConsacError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ConsacError {
    #[error("degenerate minimal set: {0}")]
    DegenerateMinimalSet(&'static str),
    #[error("singular model (|det| = {det:e})")]
    SingularModel { det: f64 },
    #[error("insufficient support: {positive} positive weights, need {required}")]
    InsufficientSupport { positive: usize, required: usize },
    #[error("too few observations: need {required}, have {available}")]
    TooFewObservations { required: usize, available: usize },
    #[error("every minimal set in the hypothesis pool was degenerate")]
    EmptyPool,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("cumulative inlier ratio needs at least one model")]
    EmptyPrefix,
    #[error("non-finite gradient in training step (scene {scene})")]
    NonFiniteGradient { scene: usize },
    #[error("cost matrix is empty")]
    EmptyMatrix,
    #[error("camera intrinsics are not invertible")]
    SingularIntrinsics,
    #[error("rebalanced sampler needs at least one non-empty group")]
    EmptyGroup,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("format error at `{path}`: {message}")]
    Format { path: String, message: String },
    #[error("unsupported document version: expected {expected}, found {found}")]
    Version { expected: u32, found: u32 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ConsacError {
    pub(crate) fn format(path: impl Into<String>, message: impl Into<String>) -> Self {
        ConsacError::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ConsacError::Io {
            path: path.into(),
            source,
        }
    }
}
