use thiserror::Error;

/// Errors produced by the index and its numerical kernels.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("matrix is singular at diagonal index {index}")]
    Singular { index: usize },
    #[error("key must not be empty")]
    EmptyKey,
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("bulk load input is not sorted at position {0}")]
    UnsortedInput(usize),
    #[error("bulk load input contains a duplicate key at position {0}")]
    DuplicateKey(usize),
    #[error("trainer has been shut down")]
    Shutdown,
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
