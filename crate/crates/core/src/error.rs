//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// Tensor extents disagree along a named axis.
    #[error("dimension mismatch on {axis}: expected {expected}, got {got}")]
    DimensionMismatch {
        axis: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed on-disk data (checkpoints, dataset files).
    #[error("format error in {what}: expected {expected}, got {got}")]
    Format {
        what: String,
        expected: String,
        got: String,
    },

    #[error("training aborted: loss is not finite (last lr {last_lr}, batch index {batch_index})")]
    NanLoss { last_lr: f64, batch_index: usize },

    /// Invariant violation inside the library, e.g. NaN propagation.
    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
