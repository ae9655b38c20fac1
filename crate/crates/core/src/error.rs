use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the evaluation toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("no regions")]
    NoRegions,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid region {index}: {reason}")]
    InvalidRegion { index: usize, reason: String },

    #[error("degenerate crop for box {index}")]
    DegenerateCrop { index: usize },

    #[error("empty caption")]
    EmptyCaption,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate conditioned feature")]
    DegenerateFeature,

    #[error("zero vector")]
    ZeroVector,

    #[error("backbone does not provide a logit temperature")]
    MissingTemperature,

    #[error("insufficient captions")]
    InsufficientCaptions,

    #[error("caption has no semantic words")]
    NoSemanticWords,

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at iteration {iter}: {detail}")]
    Diverged { iter: usize, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
