use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error at `{path}`: {reason}")]
    Config { path: String, reason: String },

    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: hookean_mkv::Error,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn config(path: impl Into<String>, reason: impl Into<String>) -> HarnessError {
    HarnessError::Config { path: path.into(), reason: reason.into() }
}

/// Attach a short description of what was being done to a core error.
pub(crate) trait Context<T> {
    fn context(self, what: &str) -> Result<T>;
}

impl<T> Context<T> for hookean_mkv::Result<T> {
    fn context(self, what: &str) -> Result<T> {
        self.map_err(|source| HarnessError::Core { context: what.to_string(), source })
    }
}

pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HarnessError {
    let path = path.into();
    move |source| HarnessError::Io { path, source }
}
