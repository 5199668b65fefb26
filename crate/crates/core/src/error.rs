use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("corpus generation failed at {path}: {source}")]
    CorpusIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("i/o failure at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("feature error: {0}")]
    Feature(String),
    #[error("augmentation error: {0}")]
    Augment(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("loss error: {0}")]
    Loss(String),
    #[error("dino error: {0}")]
    Dino(String),
    #[error("config error: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("container error: {0}")]
    Container(String),
    #[error("container version mismatch: file has version {found}, expected {expected}")]
    VersionMismatch { found: u8, expected: u8 },
    #[error("training error: {0}")]
    Training(String),
    #[error("non-finite loss at step {step} (batch {batch_id}): {detail}")]
    NonFiniteLoss {
        step: usize,
        batch_id: String,
        detail: String,
    },
    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::CorpusIo { .. } => "corpus",
            Error::Io { .. } => "io",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Manifest(_) => "manifest",
            Error::Feature(_) => "feature",
            Error::Augment(_) => "augment",
            Error::Model(_) => "model",
            Error::Loss(_) => "loss",
            Error::Dino(_) => "dino",
            Error::Config(_) => "config",
            Error::Container(_) | Error::VersionMismatch { .. } => "container",
            Error::Training(_) | Error::NonFiniteLoss { .. } => "training",
            Error::Wav(_) => "wav",
            Error::Json(_) => "json",
            Error::Tensor(_) => "tensor",
        }
    }

    /// True for errors caused by invalid user input rather than a runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::InvalidArgument(_))
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
