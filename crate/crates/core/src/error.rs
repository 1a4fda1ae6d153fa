use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("loss is not connected to this tape: {0}")]
    Disconnected(String),
    #[error("invalid action {action} (action space has {num_actions} actions)")]
    InvalidAction { action: usize, num_actions: usize },
    #[error("invalid augmentation parameters: {0}")]
    Augmentation(String),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },
    #[error("empty buffer: {0}")]
    EmptyBuffer(String),
    #[error("{0}")]
    Bandit(String),
    #[error("config parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
