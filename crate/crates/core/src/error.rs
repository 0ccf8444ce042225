use std::io;

use thiserror::Error;

/// Errors produced anywhere in the training and retrieval stack.
#[derive(Debug, Error)]
pub enum CsmfError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("lifecycle violation: {0}")]
    Lifecycle(String),

    #[error("negative sampling failed: {0}")]
    Sampling(String),

    #[error("incompatible file: {0}")]
    Incompatible(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, CsmfError>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(CsmfError::Shape(msg.into()))
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(CsmfError::Config(msg.into()))
}
