use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// Caller supplied a value outside the operation's domain.
    #[error("invalid input: {0}")]
    Input(String),

    /// An operation was invoked in a state where it is undefined.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {}: {msg}", path.display())]
    Image { path: PathBuf, msg: String },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("config: {0}")]
    Config(String),

    #[error("non-finite loss {loss} at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize, loss: f64 },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad checkpoint magic {found:?}, expected \"MMF1\"")]
    BadMagic { found: Vec<u8> },

    #[error("checkpoint truncated while reading {what}")]
    Truncated { what: String },

    #[error("parameter {name}: shape mismatch, model expects {expected:?}, checkpoint has {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("parameter #{index}: model expects {expected:?}, checkpoint has {found:?}")]
    NameMismatch {
        index: usize,
        expected: String,
        found: String,
    },

    #[error("checkpoint is missing parameter {name}")]
    Missing { name: String },

    #[error("checkpoint has {extra} unexpected trailing byte(s) after the last parameter")]
    Extra { extra: usize },

    #[error("parameter name is not valid UTF-8")]
    BadName,
}
