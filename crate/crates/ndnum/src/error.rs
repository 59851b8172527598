use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NdError {
    #[error("{op}: dimension mismatch, {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("{op}: index {index} out of range for extent {extent}")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite gradient in parameter {param}")]
    NonFinite { param: usize },

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, NdError>;
