use thiserror::Error;

/// Errors raised anywhere in the lattice, learning and simulation stack.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Singular or otherwise unusable lattice geometry.
    #[error("geometry error: {0}")]
    Geometry(String),

    /// A computation would exceed a configured resource cap.
    #[error("resource error: {what} needs {needed} candidates, cap is {cap}")]
    Resource { what: &'static str, needed: u128, cap: u128 },

    /// Caller violated an operation's preconditions.
    #[error("usage error: {0}")]
    Usage(String),

    /// Malformed or inconsistent payload on the client/server boundary.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// NaN or infinity where a finite value is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
