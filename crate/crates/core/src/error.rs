use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Network or run configuration is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),
    /// Tensor shapes do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A NaN or infinity showed up where only finite values are allowed.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// API misuse, e.g. backward without a matching forward cache.
    #[error("usage error: {0}")]
    Usage(String),
    /// Bad user-supplied values (labels out of range and similar).
    #[error("input error: {0}")]
    Input(String),
    #[error("encoding error: {0}")]
    Encoding(String),
    #[error("ingestion error at byte offset {offset}: {message}")]
    Ingestion { offset: u64, message: String },
    #[error("unsupported format version {found} (this build reads version {expected})")]
    Version { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn encoding(msg: impl Into<String>) -> Self {
        Error::Encoding(msg.into())
    }
}
