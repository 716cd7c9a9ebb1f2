use thiserror::Error;

/// Error type shared across the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Input outside the mathematical domain of an operation (log of a
    /// non-positive value, division by zero, zero-norm cosine).
    #[error("domain error: {0}")]
    Domain(String),

    /// NaN or infinity where a finite value is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// API contract violation (non-scalar backward root, negative step, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// Invalid run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or truncated on-disk artifact (checkpoint, corpus).
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
