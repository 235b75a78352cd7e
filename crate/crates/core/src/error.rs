use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("infeasible skew target head_fraction={head_fraction} head_mass={head_mass} vocab={vocab_size}: {reason}")]
    InfeasibleSkew {
        head_fraction: f64,
        head_mass: f64,
        vocab_size: u64,
        reason: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("id {id} requested on executor {executor} but owned by executor {owner}")]
    PlacementViolation { id: u64, executor: usize, owner: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("pack plan does not match batch: {0}")]
    PlanMismatch(String),

    #[error("no warmup frequency recorded for field `{0}`")]
    MissingFrequency(String),

    #[error("operation graph contains a cycle")]
    CycleDetected,

    #[error("device memory exceeded on executor: need {needed} bytes, budget {available} bytes")]
    OutOfMemory { needed: u64, available: u64 },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
