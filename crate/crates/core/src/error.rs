use std::io;

use thiserror::Error;

/// Errors produced by the registration toolkit.
#[derive(Debug, Error)]
pub enum DdnError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    /// A binary file did not match its declared layout.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("value out of range: {0}")]
    Range(String),

    /// A metric is undefined for the given input (e.g. correlation of a constant image).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// A NaN or infinity showed up where finite values are required.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("empty input: {0}")]
    Empty(String),
}

impl DdnError {
    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        DdnError::Format {
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn shape(message: impl Into<String>) -> Self {
        DdnError::Shape(message.into())
    }

    pub(crate) fn config(message: impl Into<String>) -> Self {
        DdnError::Config(message.into())
    }
}

pub type Result<T> = std::result::Result<T, DdnError>;
