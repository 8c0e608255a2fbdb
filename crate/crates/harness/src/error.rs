//! Command-level errors with fixed exit codes: 2 config, 3 missing
//! prerequisite or I/O, 4 numerical failure.

use std::fmt;

#[derive(Debug)]
pub enum HarnessError {
    /// Bad or inconsistent configuration; nothing was computed.
    Config(String),
    /// A required artifact (corpus, checkpoint) is absent; the message names
    /// the command that produces it.
    Prereq(String),
    /// Non-finite numbers surfaced during compute.
    Numerical(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Prereq(_) | HarnessError::Io(_) => 3,
            HarnessError::Numerical(_) => 4,
        }
    }

    pub fn config(msg: impl Into<String>) -> HarnessError {
        HarnessError::Config(msg.into())
    }

    pub fn prereq(msg: impl Into<String>) -> HarnessError {
        HarnessError::Prereq(msg.into())
    }
}

impl fmt::Display for HarnessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HarnessError::Config(m) => write!(f, "config error: {m}"),
            HarnessError::Prereq(m) => write!(f, "missing prerequisite: {m}"),
            HarnessError::Numerical(m) => write!(f, "numerical failure: {m}"),
            HarnessError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for HarnessError {}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e)
    }
}

impl From<dyad_core::Error> for HarnessError {
    fn from(e: dyad_core::Error) -> Self {
        match e {
            dyad_core::Error::NonFinite { .. } => HarnessError::Numerical(e.to_string()),
            dyad_core::Error::Io(io) => HarnessError::Io(io),
            other => HarnessError::Config(other.to_string()),
        }
    }
}
