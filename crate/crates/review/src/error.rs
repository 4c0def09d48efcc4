use std::path::PathBuf;

pub type ReviewResult<T> = Result<T, ReviewError>;

#[derive(Debug, thiserror::Error)]
pub enum ReviewError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("invalid: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Log {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Core(#[from] tlpim_core::Error),
}

impl ReviewError {
    pub fn is_io(&self) -> bool {
        match self {
            ReviewError::Io { .. } => true,
            ReviewError::Core(e) => e.is_io(),
            _ => false,
        }
    }
}
