//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    /// An argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// Training or evaluation produced a non-finite value.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Malformed on-disk data (HT1 headers, genotype JSON, CSV matrices).
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, details: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, details: details.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
