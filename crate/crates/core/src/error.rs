use numcore::NumError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VlkdError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("word {0:?} is not in the vocabulary")]
    UnknownWord(String),
    #[error("token id {0} is not in the vocabulary")]
    UnknownId(usize),
    #[error("sequence of length {len} exceeds the maximum {max}")]
    Length { len: usize, max: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("config key `{key}`: {detail}")]
    Config { key: String, detail: String },
    #[error("missing {what} at {path}")]
    Missing { what: &'static str, path: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl VlkdError {
    /// Short kebab-case tag suitable for scripts.
    pub fn reason(&self) -> String {
        match self {
            VlkdError::Num(_) => "numeric-error".into(),
            VlkdError::UnknownWord(_) | VlkdError::UnknownId(_) => "vocabulary-error".into(),
            VlkdError::Length { .. } => "length-error".into(),
            VlkdError::Contract(_) => "contract-violation".into(),
            VlkdError::Diverged { .. } => "training-diverged".into(),
            VlkdError::Invariant(_) => "invariant-violation".into(),
            VlkdError::Format(_) => "checkpoint-format".into(),
            VlkdError::Config { .. } => "config-error".into(),
            VlkdError::Missing { what, .. } => format!("missing-{}", what.replace(' ', "-")),
            VlkdError::Io(_) => "io-error".into(),
            VlkdError::Json(_) => "json-error".into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, VlkdError>;
