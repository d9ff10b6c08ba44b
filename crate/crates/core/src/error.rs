use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Everything that can go wrong inside the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    /// A caller broke an operation's precondition (empty loss, zero samples, p >= 1, ...).
    #[error("contract violated: {0}")]
    Contract(String),

    /// Non-finite values showed up where finite ones are required.
    #[error("numeric abort: {0}")]
    Numeric(String),

    /// Malformed image / label bytes.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    /// Data that parses fine but does not fit the model or the declared class count.
    #[error("data mismatch: {0}")]
    Mismatch(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Distinct failure modes when decoding a checkpoint.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u16),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("checkpoint tensor `{name}` has extents {found:?}, config expects {expected:?}")]
    Extent {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("invalid checkpoint contents: {0}")]
    Invalid(String),
}
