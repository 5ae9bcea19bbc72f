use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Error, Debug)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{what} mismatch: expected {expected}, found {found}")]
    Extent {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("tape error: {0}")]
    Tape(String),
    #[error("non-finite value at index {index}: {value}")]
    NonFinite { index: usize, value: f64 },
    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// True for failures of the numerics (divergence, non-finite values),
    /// as opposed to invalid input or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Divergence { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
