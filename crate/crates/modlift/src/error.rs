//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// Dimension mismatch between operands.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid parameter value (out of domain, wrong enum, missing key, ...).
    #[error("parameter error: {0}")]
    Param(String),

    /// An iterative routine produced a non-finite value.
    #[error("numerical failure at iteration {iteration}: {msg}")]
    Numeric { iteration: usize, msg: String },

    /// Text-format parse failure with 1-based line/column diagnostics.
    #[error("parse error at line {line}, column {col}: {msg}")]
    Parse { line: usize, col: usize, msg: String },

    /// Binary-container decode failure with byte offset.
    #[error("decode error at offset {offset}: {msg}")]
    Decode { offset: u64, msg: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }

    pub fn parse(line: usize, col: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            col,
            msg: msg.into(),
        }
    }

    pub fn decode(offset: u64, msg: impl Into<String>) -> Self {
        Error::Decode {
            offset,
            msg: msg.into(),
        }
    }
}
