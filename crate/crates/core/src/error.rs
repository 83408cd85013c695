use std::io;

use thiserror::Error;

/// Errors produced anywhere in the tokenizer laboratory.
#[derive(Debug, Error)]
pub enum RtkError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("training diverged at step {step}: loss = {loss}")]
    TrainingDiverged { step: usize, loss: f64 },

    #[error("undefined probe: {0}")]
    UndefinedProbe(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("fingerprint mismatch: {left} vs {right}")]
    FingerprintMismatch { left: String, right: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<RtkError>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config: {0}")]
    Config(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, RtkError>;

pub(crate) fn invalid(msg: impl Into<String>) -> RtkError {
    RtkError::InvalidArgument(msg.into())
}

impl RtkError {
    /// Wraps this error with the name of the recipe stage that produced it.
    pub fn in_stage(self, stage: &str) -> RtkError {
        RtkError::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}
