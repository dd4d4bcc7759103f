use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::AutodiffError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite {what} at denoising step {step}")]
    NonFiniteChain { what: &'static str, step: usize },
    #[error("non-finite loss (batch seed {batch_seed}); update rejected")]
    NonFiniteLoss { batch_seed: u64 },
    #[error("environment {env_index}: {message}")]
    Env { env_index: usize, message: String },
    #[error("demo generation accepted only {rate:.3} of episodes (need at least 0.1)")]
    LowAcceptance { rate: f64 },
    #[error("config {path}: {message}")]
    Config { path: String, message: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
