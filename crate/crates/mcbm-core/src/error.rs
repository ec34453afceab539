//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not conform for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An input value is outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// The API was called in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),

    /// A configuration failed validation before any work started.
    #[error("config error: {0}")]
    Config(String),

    /// A computation produced NaN/Inf or otherwise left the numeric domain.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A metric is undefined for the given inputs (e.g. zero entropy).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Checkpoint or sidecar payload could not be loaded.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn undefined_metric(msg: impl Into<String>) -> Self {
        Error::UndefinedMetric(msg.into())
    }
    pub fn checkpoint(msg: impl Into<String>) -> Self {
        Error::Checkpoint(msg.into())
    }
}
