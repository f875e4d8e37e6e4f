use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("corruption in {path}: {reason}")]
    Corruption { path: PathBuf, reason: String },

    #[error("empty table")]
    EmptyTable,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("recovery failed: {0}")]
    Recovery(String),

    #[error("injected fault at {0}")]
    InjectedFault(&'static str),

    #[error("database is closed after a failed write")]
    Poisoned,
}

impl Error {
    pub(crate) fn corruption(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Corruption {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
