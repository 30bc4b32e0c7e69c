use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the retrieval toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied an invalid value (empty text, bad shape, k out of range).
    #[error("invalid input: {0}")]
    Input(String),

    /// A file or record did not match its expected layout.
    #[error("format error: {0}")]
    Format(String),

    /// A computation produced a non-finite or undefined value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A key (concept, image id, triplet id) was not found.
    #[error("lookup failed: {0}")]
    Lookup(String),

    /// Configuration is inconsistent with the data it is applied to.
    #[error("config error: {0}")]
    Config(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    /// The text generator failed for a given concept.
    #[error("phrase generation failed for concept {concept:?}: {message}")]
    Generator { concept: String, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
