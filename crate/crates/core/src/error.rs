use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("bound violation: {0}")]
    Bound(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("divergence at step {step}: norm {norm:e} exceeds 1e8")]
    Divergence { step: usize, norm: f64 },
    #[error("layout error: {0}")]
    Layout(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("build failed in {step}: {msg}")]
    Build { step: String, msg: String },
    #[error("index out of range: {0}")]
    Index(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn build(step: &str, err: Error) -> Error {
        match err {
            Error::Build { .. } => err,
            other => Error::Build { step: step.to_string(), msg: other.to_string() },
        }
    }
}
