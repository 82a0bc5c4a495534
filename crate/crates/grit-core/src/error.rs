use std::path::PathBuf;

/// Error type shared across the crate. Variants map onto the CLI exit-code
/// classes: `Parse`/`Data` are input problems, the rest are runtime failures.
#[derive(Debug, thiserror::Error)]
pub enum GritError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl GritError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GritError::Io { path: path.into(), source }
    }

    /// True for errors caused by bad input data rather than bad runtime state.
    pub fn is_data_error(&self) -> bool {
        matches!(self, GritError::Parse { .. } | GritError::Data(_))
    }
}

pub type Result<T> = std::result::Result<T, GritError>;
