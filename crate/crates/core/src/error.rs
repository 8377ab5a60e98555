use std::path::PathBuf;

use thiserror::Error;

use crate::rig::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed container, section `{section}`: {message}")]
    Parse { section: String, message: String },

    #[error("rig validation failed: {}", format_violations(.0))]
    Validation(Vec<Violation>),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    Dimension { what: String, expected: usize, actual: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("optimization diverged: {0}")]
    Diverged(String),
}

impl Error {
    pub(crate) fn parse(section: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            section: section.into(),
            message: message.into(),
        }
    }

    pub(crate) fn dim(what: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            what: what.into(),
            expected,
            actual,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}
