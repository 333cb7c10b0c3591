//! Crate-wide error type.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, IcssnError>;

/// Everything that can go wrong in the library.
#[derive(Debug, Error)]
pub enum IcssnError {
    /// A tensor or image had a different shape than the operation requires.
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: String, details: String },

    /// Inputs violated a structural precondition (alignment, divisibility,
    /// label values, …).
    #[error("invalid input to {op}: {details}")]
    InvalidInput { op: String, details: String },

    /// A configuration file or struct failed validation.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Training aborted because a loss or gradient became non-finite.
    #[error("non-finite value during {phase} (epoch {epoch}): {details}")]
    NonFinite {
        phase: String,
        epoch: usize,
        details: String,
    },

    /// A checkpoint file was malformed or written by an incompatible version.
    #[error("bad checkpoint {path}: {details}")]
    Checkpoint { path: String, details: String },

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Image decode/encode failure.
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    /// JSON (de)serialisation failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// TOML configuration parse failure.
    #[error("toml error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl IcssnError {
    /// Shorthand for a [`IcssnError::ShapeMismatch`].
    pub fn shape(op: impl Into<String>, details: impl Into<String>) -> Self {
        IcssnError::ShapeMismatch {
            op: op.into(),
            details: details.into(),
        }
    }

    /// Shorthand for a [`IcssnError::InvalidInput`].
    pub fn invalid(op: impl Into<String>, details: impl Into<String>) -> Self {
        IcssnError::InvalidInput {
            op: op.into(),
            details: details.into(),
        }
    }
}
