//! Error type shared across the crate.
//!
//! Three broad failure classes map onto the CLI exit codes: configuration
//! problems (bad shapes, invalid config files), data problems (missing or
//! malformed dataset files), and numerical problems (divergence, non-finite
//! values reaching an optimizer step).

use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All errors surfaced by the library.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Invalid configuration: incompatible shapes, bad divisibility,
    /// unknown config keys, out-of-range hyperparameters.
    Config(String),
    /// Dataset ingestion failure: missing files, bad magic numbers,
    /// truncated payloads, count mismatches.
    Data(String),
    /// Numerical failure: non-finite losses or gradients, divergence.
    Numerical(String),
    /// Filesystem or serialization failure outside dataset loading
    /// (checkpoints, metrics, exports).
    Io(String),
}

impl Error {
    /// Exit code for the CLI: 1 config, 2 data, 3 numerical divergence.
    /// I/O failures during output writing are reported as config-class
    /// errors (exit 1) since they indicate an unusable run setup.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Io(_) => 1,
            Error::Data(_) => 2,
            Error::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Numerical(msg) => write!(f, "numerical error: {msg}"),
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
