use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("unsupported format: {0}")]
    Format(String),

    #[error("numeric failure at slice {slice:?}: {message}")]
    Numeric { slice: Option<usize>, message: String },

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Training { epoch: usize, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn numeric(slice: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Numeric {
            slice,
            message: msg.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
