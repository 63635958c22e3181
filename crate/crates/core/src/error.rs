use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus: {0}")]
    EmptyCorpus(&'static str),

    #[error("invalid label: {0}")]
    InvalidLabel(String),

    #[error("label token `{0}` is not in the vocabulary")]
    UnknownLabel(String),

    #[error("sequence length {0} is too short for the input layout (need at least 5)")]
    LayoutTooShort(usize),

    #[error("mask row {0} blocks every column")]
    DeadMaskRow(usize),

    #[error("invalid grammar: {0}")]
    Grammar(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no example with a different intent in the negative pool")]
    NoNegativeCandidate,

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("training diverged at step {step}; last finite total loss {last_finite:?}")]
    Diverged { step: usize, last_finite: Option<f64> },

    #[error("empty {0} test partition")]
    EmptyPartition(&'static str),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
