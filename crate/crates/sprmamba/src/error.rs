//! Error type shared across the crate.

use std::fmt;

/// All fallible operations in this crate return `Result<T, Error>`.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Array shapes are incompatible for the requested operation.
    Dimension(String),
    /// A configuration value is invalid or inconsistent.
    Config(String),
    /// A numeric argument is outside the operation's domain.
    Domain(String),
    /// The API was called in an unsupported way.
    Usage(String),
    /// Input data is malformed (labels out of range, length mismatch, ...).
    Data(String),
    /// A serialized file is corrupt or has an unsupported layout.
    Format(String),
    /// I/O failure while reading or writing files.
    Io(String),
    /// An internal consistency check failed.
    Internal(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::Domain(m) => write!(f, "domain error: {m}"),
            Error::Usage(m) => write!(f, "usage error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Io(m) => write!(f, "io error: {m}"),
            Error::Internal(m) => write!(f, "internal error: {m}"),
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
