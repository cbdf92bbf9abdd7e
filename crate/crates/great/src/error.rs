//! Crate-wide error type.

use thiserror::Error;

/// Errors produced across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor or vector shapes, naming both sides.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A dimension constraint was violated (kernel larger than input, bad window, ...).
    #[error("dimension error in {op}: {msg}")]
    Dimension { op: &'static str, msg: String },

    /// An index (class label, row, node id) was out of range.
    #[error("index error: {0}")]
    Index(String),

    /// A lookup key (node id, parameter name) does not exist.
    #[error("lookup error: {0}")]
    Lookup(String),

    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// A numeric failure such as a non-finite gradient.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed input file; `line` is 1-based (0 when unknown).
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// Filesystem failure with the offending path.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
