use thiserror::Error;

/// Errors produced anywhere in the engine, from tensor ops up to file I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("degenerate mask: row {row} has no unmasked entries")]
    DegenerateMask { row: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("vocabulary error: {0}")]
    Vocab(String),

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("loss is NaN at step {step} (batch {batch}): {detail}")]
    NanLoss {
        step: usize,
        batch: usize,
        detail: String,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(source: std::io::Error) -> Self {
        Error::Io {
            context: "i/o".to_string(),
            source,
        }
    }
}
