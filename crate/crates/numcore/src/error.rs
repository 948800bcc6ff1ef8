use thiserror::Error;

pub type Result<T> = std::result::Result<T, NumError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: degenerate input: {detail}")]
    Degenerate { op: &'static str, detail: String },
    #[error("{op}: index {index} out of range for size {size}")]
    Index {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl NumError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        NumError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
