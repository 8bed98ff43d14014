use thiserror::Error;

use crate::scenegen::GenError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error("token {0:?} is not in the vocabulary")]
    UnknownToken(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("vocabulary mismatch: checkpoint {checkpoint}, dataset {dataset}")]
    VocabMismatch { checkpoint: String, dataset: String },
    #[error("unsupported analysis: {0}")]
    Unsupported(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("non-finite value produced by op `{op}` at epoch {epoch}, step {step}")]
    Diverged {
        op: &'static str,
        epoch: usize,
        step: usize,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
