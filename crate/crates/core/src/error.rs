use metatpp_autograd::{OptimError, TensorError};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Record { line: usize, msg: String },
    #[error("line {line}: arrival times not strictly increasing at index {index}")]
    NotIncreasing { line: usize, index: usize },
    #[error("line {line}: mark {mark} outside [0, {num_marks})")]
    MarkRange {
        line: usize,
        mark: usize,
        num_marks: usize,
    },
    #[error("line {line}: sequence has {len} events, at least 2 required")]
    TooShort { line: usize, len: usize },
    #[error("sequence of length {len} exceeds batch length {l_max}")]
    TooLong { len: usize, l_max: usize },
    #[error("split fractions {0:?} must be in [0, 1] and sum to 1")]
    Fractions(Vec<f64>),
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("non-finite activations in encoder layer {layer}")]
    NonFinite { layer: usize },
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
