use thiserror::Error;

#[derive(Debug, Error)]
pub enum CfmError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unsupported primitive `{0}` in differentiated program")]
    UnsupportedPrimitive(String),

    #[error("non-finite loss in component `{0}`")]
    NonFiniteLoss(String),

    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("schedule singularity: alpha({0}) = 0 before t = 1")]
    ScheduleSingularity(f64),

    #[error("degenerate slice {0}: probabilities sum to {1}")]
    DegenerateSlice(usize, f64),

    #[error("all particle weights are degenerate")]
    AllWeightsDegenerate,

    #[error("enumeration budget exceeded: {0} states")]
    BudgetExceeded(u128),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = CfmError> = std::result::Result<T, E>;
