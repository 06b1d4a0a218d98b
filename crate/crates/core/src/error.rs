use std::io;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
///
/// The variants are coarse on purpose: the CLI maps each one onto an exit code.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on shapes, counts or configuration was violated.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A NaN or infinity showed up in a forward/backward pass or a metric.
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}

pub(crate) fn numeric<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Numeric(msg.into()))
}
