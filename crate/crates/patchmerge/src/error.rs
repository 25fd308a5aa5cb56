use std::io;

use patchmerge_core::{AutodiffError, GeometryError, ModelError, SynthError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Data(_) | Error::Io { .. } => 2,
            Error::Numeric(_) => 3,
        }
    }

    pub fn io(path: &std::path::Path, source: io::Error) -> Self {
        Error::Io { path: path.display().to_string(), source }
    }
}

impl From<ModelError> for Error {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::NonFinite(_) => Error::Numeric(e.to_string()),
            ModelError::InvalidConfig(_) => Error::Usage(e.to_string()),
            _ => Error::Data(e.to_string()),
        }
    }
}

impl From<SynthError> for Error {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::InvalidConfig(_) => Error::Usage(e.to_string()),
            _ => Error::Data(e.to_string()),
        }
    }
}

impl From<GeometryError> for Error {
    fn from(e: GeometryError) -> Self {
        Error::Data(e.to_string())
    }
}

impl From<AutodiffError> for Error {
    fn from(e: AutodiffError) -> Self {
        Error::Data(e.to_string())
    }
}
