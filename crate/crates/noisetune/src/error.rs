//! Crate-wide error type.
//!
//! The CLI maps these onto process exit codes: configuration and parse
//! problems are usage errors (1), verification failures exit 3, and
//! everything else that goes wrong at runtime exits 2.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Operand shapes incompatible with the requested operation.
    Shape { op: &'static str, detail: String },
    /// Invalid argument, hyperparameter, or configuration value.
    Config(String),
    /// Malformed input: dataset records, checkpoints, config files, CSV.
    Parse(String),
    /// Numeric breakdown at runtime (non-finite loss, overflowing scale...).
    Numeric(String),
    /// A statistical routine was handed degenerate input.
    Degenerate(String),
    /// An empirical verification check found a violated bound.
    Verification(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape error in `{op}`: {detail}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Parse(msg) => write!(f, "parse error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Degenerate(msg) => write!(f, "degenerate input: {msg}"),
            Error::Verification(msg) => write!(f, "verification failure: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
