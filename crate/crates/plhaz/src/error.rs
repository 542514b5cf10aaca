use thiserror::Error;

/// Crate-wide error type. Variants map one-to-one onto the CLI exit codes
/// (see `cli::exit_code`), so failures stay distinguishable from scripts.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("ingestion error (row {row}): {message}")]
    Ingest { row: usize, message: String },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("inference error: {0}")]
    Inference(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
