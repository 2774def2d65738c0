use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("degenerate sprite: {0}")]
    DegenerateSprite(String),

    #[error("singular thin-plate-spline system: {0}")]
    SingularTps(String),

    #[error("grid too large for dense oracle: {h}x{w} (max 5x5)")]
    GridTooLarge { h: usize, w: usize },

    #[error("{0} needs at least two samples")]
    BatchTooSmall(&'static str),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("unsupported option: {0}")]
    Unsupported(String),

    #[error("corrupt checkpoint at byte {offset}: {reason}")]
    CorruptCheckpoint { offset: usize, reason: String },

    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("non-finite loss at step {step}: {components}")]
    NonFiniteLoss { step: u64, components: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {reason}")]
    Png { path: PathBuf, reason: String },

    #[error("{0}")]
    Format(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn png(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Png { path: path.into(), reason: reason.to_string() }
    }
}
