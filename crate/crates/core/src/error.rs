use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::ParamStore;

/// Errors surfaced by every stage of the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("input of {len} tokens exceeds max_seq_len {max}")]
    Overlong { len: usize, max: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64, last_good: LastGood },

    #[error("undefined statistic: {0}")]
    Undefined(String),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing or stale artifact {path}: {reason}")]
    Artifact { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

/// Parameters from before the step that diverged.
pub struct LastGood(pub Box<ParamStore<f32>>);

impl std::fmt::Debug for LastGood {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "LastGood({} params, digest {})", self.0.numel(), self.0.digest())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
