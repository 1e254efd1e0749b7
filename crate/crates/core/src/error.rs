use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid class index {index} (model has {classes} classes)")]
    InvalidClass { index: usize, classes: usize },

    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss in batch {batch}")]
    NonFiniteLoss { batch: usize },

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("duplicate image id {0}")]
    DuplicateImage(String),

    #[error("image {0} not present")]
    UnknownImage(String),

    #[error("empty (class, split) cell: class {class}, split {split}")]
    EmptyCell { class: usize, split: String },

    #[error("class {class} has {available} unseen images with d <= {cap}, need {needed}")]
    InsufficientPool {
        class: usize,
        cap: f64,
        available: usize,
        needed: usize,
    },

    #[error("statistics: {0}")]
    Stats(String),

    #[error("session {0} not found")]
    SessionNotFound(String),

    #[error("participant {participant} already has a session in experiment {experiment}")]
    Conflict { experiment: String, participant: String },

    #[error("session {0} is {1} and accepts no further trials")]
    Terminal(String, &'static str),

    #[error("trial ordering violated: expected trial {expected}, got {got}")]
    Ordering { expected: usize, got: usize },

    #[error("session {0} is still active")]
    StillActive(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    IoBare(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error("config: {0}")]
    Config(String),

    #[error("remote service answered {status} ({kind}): {message}")]
    Remote { status: u16, kind: String, message: String },
}

impl Error {
    /// Stable machine-readable name of the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::SessionNotFound(_) | Error::UnknownImage(_) => "not_found",
            Error::Conflict { .. } => "conflict",
            Error::Terminal(..) => "terminal_state",
            Error::Ordering { .. } => "ordering",
            Error::StillActive(_) => "still_active",
            Error::InvalidArgument(_) | Error::InvalidClass { .. } | Error::Shape { .. } => "validation",
            Error::Config(_) => "config",
            Error::Remote { .. } => "remote",
            _ => "internal",
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
