use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, OdmlError>;

#[derive(Debug, Error)]
pub enum OdmlError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("row {row} is not a probability distribution (sum = {sum})")]
    NotDistribution { row: usize, sum: f64 },

    #[error("embedding row {row} is not unit-norm (norm = {norm})")]
    NotNormalized { row: usize, norm: f64 },

    #[error("triplet mining precondition violated for class {class}: {reason}")]
    TripletPrecondition { class: usize, reason: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at stage {stage}, iteration {iteration}")]
    Diverged { stage: usize, iteration: usize },

    #[error("task classes overlap: class {0} appears in more than one task")]
    ClassOverlap(usize),

    #[error("{path}: line {line}: {msg}")]
    Csv { path: PathBuf, line: u64, msg: String },

    #[error("bad file format in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("registry: {0}")]
    Registry(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl OdmlError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Self::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidArgument(msg.into())
    }
}
