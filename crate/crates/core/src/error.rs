use thiserror::Error;

/// Errors surfaced by the quantization, adapter, model and training code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate quantization range: theta_min={min}, theta_max={max}")]
    DegenerateRange { min: f64, max: f64 },

    #[error("contract error: {0}")]
    Contract(String),

    #[error("applicability error: {0}")]
    Applicability(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("self-check failed: {0}")]
    SelfCheck(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
