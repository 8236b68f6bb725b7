use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("negative power {value} at (ap {ap}, ue {ue})")]
    NegativePower { ap: usize, ue: usize, value: f64 },

    #[error("materialization cap exceeded: {rows} rows > cap {cap}")]
    CapExceeded { rows: usize, cap: usize },

    #[error("unknown structure or task: {0}")]
    Unknown(String),

    #[error("non-finite activation at layer {layer} (max |z| = {max_abs})")]
    Diverged { layer: usize, max_abs: f64 },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at step {step}: loss {loss}, reward {reward}")]
    TrainingDiverged { step: usize, loss: f64, reward: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(expected: impl ToString, got: impl ToString) -> Error {
    Error::ShapeMismatch {
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
