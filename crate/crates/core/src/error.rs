//! Error type shared by every module of the crate.

use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not agree for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A configuration value or derived shape is invalid.
    #[error("configuration error: {0}")]
    Config(String),
    /// A caller violated an operation precondition.
    #[error("contract error: {0}")]
    Contract(String),
    /// Text could not be parsed; `pos` is a 0-based character offset.
    #[error("parse error at position {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    /// A binary file is malformed; `offset` is the byte where decoding failed.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },
    /// Checkpoint carries a version this build does not read.
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    /// Dataset contents are missing or inconsistent.
    #[error("data error: {0}")]
    Data(String),
    /// Retrieval evaluation cannot produce a metric.
    #[error("evaluation error: {0}")]
    Eval(String),
    /// A non-finite value appeared during training.
    #[error("numeric failure at step {step}: {msg}")]
    Numeric { step: u64, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }
}
