use std::path::PathBuf;

/// Errors raised by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A signal block with zero energy cannot be power-normalized.
    #[error("degenerate signal: block {index} has zero power")]
    DegenerateSignal { index: usize },

    /// Inconsistent or invalid configuration.
    #[error("configuration error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// Tensor or signal dimensions do not match what a component expects.
    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    /// A checkpoint was produced by a different configuration.
    #[error("checkpoint configuration mismatch:\n{diff}")]
    CheckpointMismatch { diff: String },

    /// Training produced a non-finite loss.
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch} (lr {lr})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        lr: f64,
        loss: f64,
    },

    /// Dataset files are missing, malformed or fail their integrity check.
    #[error("dataset error at {path}: {reason}")]
    Dataset { path: PathBuf, reason: String },

    /// The external image codec cannot be invoked.
    #[error("image codec unavailable: {0}")]
    CodecUnavailable(String),

    /// The external image codec ran but failed.
    #[error("image codec failed: {0}")]
    Codec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
