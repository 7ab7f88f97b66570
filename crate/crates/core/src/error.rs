use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] coconut_autodiff::Error),
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error("unknown word `{0}`")]
    UnknownWord(String),
    #[error("token id {id} is outside the vocabulary of {vocab}")]
    OutOfVocab { id: usize, vocab: usize },
    #[error("{0} must not be empty")]
    Empty(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("task {task}, step {step}: non-finite loss ({detail})")]
    Divergence { task: usize, step: usize, detail: String },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
