use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    /// A value outside the domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Two objects with incompatible bin geometry.
    #[error("geometry mismatch: {0}")]
    Geometry(String),

    #[error("failed to load {path}: {detail}")]
    Load { path: PathBuf, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged: {0}")]
    Training(String),

    #[error("{0}")]
    Runtime(String),

    /// Failure inside a named pipeline stage.
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<CoreError>,
    },

    #[error(transparent)]
    Nn(#[from] centro_nn::NnError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(CoreError::Domain(msg.into()))
}
