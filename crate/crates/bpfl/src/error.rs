use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or architecture inconsistency.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Value outside the operation's domain (labels, mask values, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A NaN or infinity escaped a numeric operation.
    #[error("numeric error: {0}")]
    NonFinite(String),

    /// API misuse (e.g. backward without a recorded forward pass).
    #[error("usage error: {0}")]
    Usage(String),

    /// Invalid configuration value or degenerate experiment parameters.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint corruption or checksum mismatch.
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
