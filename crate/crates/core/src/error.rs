use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("empty reduction")]
    EmptyReduction,

    #[error("empty context")]
    EmptyContext,

    #[error("causal requires square context (n_Q = {n_q}, n_K = {n_k})")]
    NonSquareCausal { n_q: usize, n_k: usize },

    #[error("shape mismatch in {what}: expected {expected}, got {actual}")]
    ShapeMismatch {
        what: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid entry {value} at index {index} of {what}")]
    InvalidEntry {
        what: &'static str,
        index: usize,
        value: f64,
    },

    #[error("dimension {what} must be at least 1")]
    ZeroDimension { what: &'static str },

    #[error("finite-difference step must be positive and finite, got {0}")]
    InvalidStep(f64),

    #[error("corrupt state snapshot: {0}")]
    CorruptSnapshot(String),
}

impl Error {
    pub(crate) fn shape(what: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            what,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
