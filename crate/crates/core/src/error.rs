use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("action {action} out of range (arm has {num_actions} actions)")]
    ActionOutOfRange { action: usize, num_actions: usize },

    #[error("state {value} outside [{floor}, {cap}]")]
    InvalidState { value: usize, floor: usize, cap: usize },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("value iteration did not converge within {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("arm is not indexable at state {state} for resource {resource}")]
    NotIndexable { state: usize, resource: usize },

    #[error("instance too large for enumeration: {0} arms")]
    InstanceTooLarge(usize),

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
