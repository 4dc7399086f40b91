use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("invalid split: {0}")]
    Split(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {tensor}")]
    NonFinite { tensor: String },

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("corpus: {0}")]
    Corpus(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}
