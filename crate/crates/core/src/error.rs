use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("decoding error: {0}")]
    Decoding(String),

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error: unknown labels on lines {lines:?}: {labels:?}")]
    Schema { lines: Vec<usize>, labels: Vec<String> },

    #[error("validation error on line {line}: {message}")]
    Validation { line: usize, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("state error: {0}")]
    State(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("shape mismatch: {}", .0.join("; "))]
    Mismatch(Vec<String>),

    #[error("undefined metrics: {0}")]
    Undefined(String),

    #[error("non-finite loss {loss} at step {step} (examples {example_ids:?})")]
    NonFiniteLoss {
        step: usize,
        loss: f64,
        example_ids: Vec<String>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the caller's inputs (bad config, data or
    /// files) rather than by an internal fault.
    pub fn is_user_error(&self) -> bool {
        !matches!(
            self,
            Error::Numeric(_)
                | Error::State(_)
                | Error::Contract(_)
                | Error::NonFiniteLoss { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
