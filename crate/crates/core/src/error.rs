use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration value.
    #[error("configuration error: {0}")]
    Config(String),

    /// Array dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Input data violates a precondition (empty batch, unknown token, ...).
    #[error("input error: {0}")]
    Input(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("corrupted file: {0}")]
    Corrupt(String),

    #[error("attempted to modify a frozen model snapshot")]
    FrozenMutation,

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    Divergence { epoch: usize, step: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }

    /// True for errors that stem from bad user-supplied configuration or usage
    /// rather than from a failed computation or I/O.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
