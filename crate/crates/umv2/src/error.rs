//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum UmvError {
    /// Invalid shapes, hyperparameters, or config fields. The message names
    /// the offending field where possible.
    #[error("configuration error: {0}")]
    Config(String),

    /// Inputs outside an operation's mathematical domain (e.g. sigma <= 0).
    #[error("domain error: {0}")]
    Domain(String),

    /// Non-finite values or numeric breakdown inside a kernel.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// API misuse, e.g. backward called without a forward cache.
    #[error("usage error: {0}")]
    Usage(String),

    /// Calibration failed to converge; carries diagnostics.
    #[error("calibration error: {0}")]
    Calibration(String),

    /// Initialization verification detected divergence or mismatch.
    #[error("verification failure: {0}")]
    Verification(String),

    /// Checkpoint format violations: bad magic, version, offsets, truncation.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, UmvError>;

impl UmvError {
    pub fn config(msg: impl Into<String>) -> Self {
        UmvError::Config(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        UmvError::Domain(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        UmvError::Numeric(msg.into())
    }
    pub fn usage(msg: impl Into<String>) -> Self {
        UmvError::Usage(msg.into())
    }
}
