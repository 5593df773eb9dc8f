use thiserror::Error;

/// Errors raised anywhere in the lab.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A non-finite activation appeared during a forward pass.
    #[error("non-finite activation at layer {layer}")]
    NonFinite { layer: usize },

    /// Training loss became non-finite.
    #[error("training diverged at step {step}")]
    Divergence { step: usize },

    #[error("infeasible schedule: {0}")]
    InfeasibleSchedule(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(LabError::Argument(msg.into()))
}

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(LabError::Dimension(msg.into()))
}
