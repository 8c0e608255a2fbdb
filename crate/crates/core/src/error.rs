//! Error taxonomy shared across the crate.
//!
//! Three kinds matter to callers: bad inputs (shape/domain violations),
//! malformed files (always carrying a line number when line-oriented), and
//! numerical blow-ups (always naming the step that produced the non-finite
//! value so samplers can be debugged).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input error: {0}")]
    Input(String),

    #[error("format error at line {line}: {msg}")]
    Format { line: usize, msg: String },

    #[error("numerical error in {context}: non-finite value encountered")]
    NonFinite { context: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn format(line: usize, msg: impl Into<String>) -> Self {
        Error::Format { line, msg: msg.into() }
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite { context: context.into() }
    }
}
