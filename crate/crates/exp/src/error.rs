use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExpError {
    #[error("invalid experiment spec: {0}")]
    InvalidSpec(String),

    #[error(transparent)]
    Core(#[from] mdgnn::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ExpError>;
