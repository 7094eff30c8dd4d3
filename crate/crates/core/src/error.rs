use thiserror::Error;

/// Errors surfaced by the library. CLI exit codes map config/data/parse/usage
/// errors to nonzero; a non-converged fit is a reported outcome, not an error.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("contract error: {0}")]
    Contract(String),

    /// Optimization produced a non-finite loss. Carries the last finite
    /// trajectory row (if any) as diagnostics.
    #[error("non-finite loss at epoch {epoch}; last finite row: {last_row}")]
    NonFinite { epoch: usize, last_row: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
