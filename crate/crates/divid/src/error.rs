use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DividError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: cannot decode: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{what}: format version {found} is not supported (expected {expected})")]
    Version { what: &'static str, found: u32, expected: u32 },
    #[error("invalid: {0}")]
    Invalid(String),
    #[error(transparent)]
    Core(#[from] divid_core::Error),
}

pub type Result<T> = std::result::Result<T, DividError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> DividError {
    let path = path.into();
    move |source| DividError::Io { path, source }
}
