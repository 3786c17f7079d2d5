use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// An input violated a documented precondition.
    #[error("validation: {0}")]
    Validation(String),
    /// Not enough data to perform the operation (e.g. fewer frames than centroids).
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    /// A sequence would exceed the configured capacity.
    #[error("capacity: {0}")]
    Capacity(String),
    /// Sampling could not proceed (e.g. no token has finite probability).
    #[error("sampling: {0}")]
    Sampling(String),
    /// The requested quantity is mathematically undefined for these inputs.
    #[error("undefined result: {0}")]
    UndefinedResult(String),
    /// An external provider (transcriber, scorer, ...) failed.
    #[error("provider: {0}")]
    Provider(String),
    /// Configuration is malformed or inconsistent.
    #[error("config: {0}")]
    Config(String),
    /// A persisted file is malformed.
    #[error("format: {0}")]
    Format(String),
    /// Training diverged into non-finite territory.
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}
