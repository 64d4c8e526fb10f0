use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HearError {
    #[error("invalid config: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("feature archive {path}: {reason}")]
    FeatureArchive { path: PathBuf, reason: String },

    #[error("dialogue record {record}: {reason}")]
    Avsd { record: String, reason: String },

    #[error("sequence of {len} positions exceeds max length {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("non-finite loss at iteration {iteration}: {loss}")]
    NonFiniteLoss { iteration: u64, loss: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HearError>;

pub(crate) fn config_err(field: &str, reason: impl Into<String>) -> HearError {
    HearError::Config { field: field.to_string(), reason: reason.into() }
}
