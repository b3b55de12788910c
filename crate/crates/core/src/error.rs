//! Error taxonomy shared across the crate. Variants map one-to-one onto the
//! CLI exit-code classes: validation (config/contract/shape), I/O, numeric.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes or dimensions.
    #[error("dimension error: {0}")]
    Dim(String),
    /// An API contract was violated (e.g. backward on a consumed graph).
    #[error("contract error: {0}")]
    Contract(String),
    /// An out-of-range or inconsistent parameter value.
    #[error("parameter error: {0}")]
    Param(String),
    /// Malformed input file (WAV, checkpoint, trial list).
    #[error("format error: {0}")]
    Format(String),
    /// Invalid run configuration.
    #[error("config error: {0}")]
    Config(String),
    /// Non-finite values where finite ones are required.
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
