//! Error types shared across the crate.

use std::fmt;

/// Crate-wide error type.
///
/// The variants map onto the CLI exit-code contract: `Contract` and
/// `Parse`/`Config` are usage errors (exit 2), `Numeric` is a numerical
/// failure (exit 3), assertion failures in verification suites are
/// reported separately (exit 1).
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A caller violated an operation's precondition (shape mismatch,
    /// invalid label, wrong head mode, ...).
    Contract(String),
    /// A numerical failure: non-finite value, vanishing norm, ...
    Numeric(String),
    /// A file could not be parsed (IDX data, config, checkpoint).
    Parse(String),
    /// An I/O failure, stringified to keep the error type cloneable.
    Io(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Parse(msg) => write!(f, "parse error: {msg}"),
            Error::Io(msg) => write!(f, "io error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Shorthand used by ops to reject bad shapes and arguments.
pub fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

/// Shorthand for numerical failures.
pub fn numeric(msg: impl Into<String>) -> Error {
    Error::Numeric(msg.into())
}
