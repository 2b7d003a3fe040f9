use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not positive definite ({0})")]
    NotPositiveDefinite(&'static str),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("non-finite conditional parameters at sweep {sweep}, block `{block}`")]
    Sampler { sweep: usize, block: &'static str },

    #[error("optimizer failed at k={k_tilde}, lambda index {lambda_index}: {source}")]
    Path {
        k_tilde: usize,
        lambda_index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("loss grid has no full-model fit at k={0}, lambda=0")]
    MissingFullModel(usize),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse classification used by the command-line front end for exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config { .. } | Error::InvalidValue(_) | Error::Dimension(_) => {
                ErrorKind::Config
            }
            Error::NotPositiveDefinite(_) | Error::Sampler { .. } | Error::MissingFullModel(_) => {
                ErrorKind::Numerical
            }
            Error::Path { source, .. } => source.kind(),
            Error::Format { .. } | Error::Io { .. } => ErrorKind::Io,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Numerical,
    Io,
}
