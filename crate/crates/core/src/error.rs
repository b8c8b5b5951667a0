//! Error type shared by every pipeline stage.

use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    Domain(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite value in term `{term}` at step {step}")]
    NonFinite { term: String, step: u64 },
    #[error("{module}.{op}: {source}")]
    Stage {
        module: &'static str,
        op: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl AsRef<Path>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.as_ref().to_path_buf();
        move |source| Error::Io { path, source }
    }

    pub fn image(path: impl AsRef<Path>, message: impl Into<String>) -> Error {
        Error::Image {
            path: path.as_ref().to_path_buf(),
            message: message.into(),
        }
    }

    /// Wrap with the failing module and operation for CLI reporting.
    pub fn stage(self, module: &'static str, op: &'static str) -> Error {
        Error::Stage {
            module,
            op,
            source: Box::new(self),
        }
    }
}

pub trait ResultExt<T> {
    fn stage(self, module: &'static str, op: &'static str) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn stage(self, module: &'static str, op: &'static str) -> Result<T> {
        self.map_err(|e| e.stage(module, op))
    }
}
