use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: failed to decode image: {message}")]
    Image { path: PathBuf, message: String },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("run directory was created with config hash {expected}, current config hashes to {found}")]
    ConfigHashMismatch { expected: String, found: String },

    #[error(
        "generator loss became non-finite at iteration {iteration}: \
         ce={ce} div={div} bn={bn} prior={prior}"
    )]
    NonFiniteLoss {
        iteration: usize,
        ce: f64,
        div: f64,
        bn: f64,
        prior: f64,
    },

    #[error("missing {0}")]
    Missing(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
