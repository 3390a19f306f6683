use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid schedule parameters: {0}")]
    InvalidParams(String),

    #[error("denoising step {k} exceeds the configured {n_steps} steps")]
    StepOverflow { k: usize, n_steps: usize },

    #[error("non-finite loss {loss} at training step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("non-finite action at committed step {0}")]
    NonFiniteAction(usize),

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("strategy `{strategy}` requires a `{required}` checkpoint, got `{found}`")]
    StrategyMismatch {
        strategy: String,
        required: String,
        found: String,
    },

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
