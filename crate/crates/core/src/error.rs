use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of its admissible range or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// An input (vector, matrix, query) violates a precondition.
    #[error("input error: {0}")]
    Input(String),

    /// Filesystem or serialization failure; includes the offending path.
    #[error("I/O error on {path}: {message}")]
    Io { path: String, message: String },

    /// An operation was called on an object in the wrong state.
    #[error("state error: {0}")]
    State(String),

    /// Training aborted because a loss term became non-finite.
    #[error("non-finite loss: first non-finite term was {term} at epoch {epoch}")]
    NonFiniteLoss { term: String, epoch: usize },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, err: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            message: err.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
