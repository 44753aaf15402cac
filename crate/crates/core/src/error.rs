//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or operand shapes are inconsistent.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An input contained NaN or infinity.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// An index fell outside its valid range.
    #[error("index out of range: {0}")]
    Index(String),

    /// An argument value is invalid for the operation.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A cache chunk cannot fit even after evicting everything evictable.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// A tensor file failed to parse; `offset` is the byte position of the problem.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// A run configuration failed validation.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
