//! Error type shared by every module of the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VpoError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value at index {index}: {context}")]
    NonFinite { index: usize, context: String },

    #[error("resource limit exceeded: {0}")]
    Resource(String),

    #[error("spec error in `{key}`: {constraint}")]
    Spec { key: String, constraint: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, VpoError>;

pub(crate) fn invalid(msg: impl Into<String>) -> VpoError {
    VpoError::InvalidArgument(msg.into())
}
