use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by file ingestion, configuration and validation.
///
/// Per-point numerical conditions (a point behind a camera, too few views
/// for a triangulation, a singular innovation covariance) are not errors;
/// they are reported as flags on the relevant result types.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: String, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::Validation(message.into())
    }

    /// True for errors caused by bad inputs rather than a failing computation.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Stage { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
