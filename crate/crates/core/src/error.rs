//! Error type shared across the crate.

use thiserror::Error;

/// All failure modes surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/operand shapes are incompatible with the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A configuration value is invalid or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data violates a documented precondition.
    #[error("validation error: {0}")]
    Validation(String),

    /// An API contract was violated (e.g. backward on a non-scalar loss).
    #[error("contract error: {0}")]
    Contract(String),

    /// NaN/Inf appeared where finite values are required, or a gradient
    /// check failed.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A file could not be parsed; `offset` is the byte position of the
    /// first invalid content.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
    pub fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }

    /// Process exit code for the CLI: 1 = validation/config, 2 = numerical,
    /// 3 = I/O or format.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension(_) | Error::Config(_) | Error::Validation(_) | Error::Contract(_) => 1,
            Error::Numerical(_) => 2,
            Error::Format { .. } | Error::Io(_) => 3,
        }
    }
}
