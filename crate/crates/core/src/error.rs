use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("position {position} out of range (table holds {max} positions)")]
    Range { position: usize, max: usize },

    #[error("sequence of length {len} exceeds maximum {max}")]
    Length { len: usize, max: usize },

    #[error("optimizer refused step: {0}")]
    Optimizer(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("resume refused: {0}")]
    Resume(String),

    #[error("malformed data: {0}")]
    Data(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) => 1,
            Error::Data(_) | Error::Io { .. } | Error::Resume(_) => 2,
            Error::Range { .. }
            | Error::Length { .. }
            | Error::Optimizer(_)
            | Error::Numeric(_) => 3,
        }
    }
}
