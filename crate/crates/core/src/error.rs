use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("{}:{line}: {msg}", path.display())]
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

    #[error("corrupt model: {0}")]
    CorruptModel(String),
}

impl Error {
    /// Short machine-readable tag, used by the CLI's `ERROR:<kind>:` prefix.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "InvalidInput",
            Error::InsufficientData(_) => "InsufficientData",
            Error::InvalidState(_) => "InvalidState",
            Error::Parse { .. } => "Parse",
            Error::Io { .. } => "IOError",
            Error::CorruptModel(_) => "CorruptModel",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
