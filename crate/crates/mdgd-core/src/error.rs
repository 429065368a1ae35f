//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. The variants map onto the
//! CLI exit codes: config/contract/usage problems exit 2, I/O exits 3,
//! container format problems exit 4, numeric failures exit 5.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or axis mismatch between tensors.
    #[error("dimension error: {0}")]
    Dim(String),

    /// A caller-side precondition was violated.
    #[error("contract error: {0}")]
    Contract(String),

    /// An object was used in an unsupported order (e.g. backward twice).
    #[error("usage error: {0}")]
    Usage(String),

    /// A numeric procedure failed to converge or produced non-finite values.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Input outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Sequence or buffer capacity exceeded.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// Malformed or wrong-version container/file format.
    #[error("format error: {0}")]
    Format(String),

    /// Invalid run configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
