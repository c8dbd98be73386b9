use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] io::Error),

    /// Malformed input; `line` is 1-based.
    #[error("format error at line {line}: {msg}")]
    Format { line: usize, msg: String },

    /// Well-formed input with unusable content (e.g. an empty sentence).
    #[error("data error at line {line}: {msg}")]
    Data { line: usize, msg: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    /// Zero-norm vector or zero-variance sample.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// Caller broke a shape or mode contract.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("model error: {0}")]
    Model(String),
}

impl Error {
    pub(crate) fn format(line: usize, msg: impl Into<String>) -> Self {
        Error::Format { line, msg: msg.into() }
    }

    pub(crate) fn data(line: usize, msg: impl Into<String>) -> Self {
        Error::Data { line, msg: msg.into() }
    }
}
