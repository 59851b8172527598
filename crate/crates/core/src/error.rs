use thiserror::Error;

use magvlt_ndnum::NdError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vocabulary error: {0}")]
    Vocab(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("generation error: {0}")]
    Generation(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Numeric(#[from] NdError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    /// Short stable tag used by the CLI's machine-readable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Vocab(_) => "vocab",
            Error::Parse(_) => "parse",
            Error::Contract(_) => "contract",
            Error::Config { .. } => "config",
            Error::Generation(_) => "generation",
            Error::Format(_) => "format",
            Error::Numeric(_) => "numeric",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
