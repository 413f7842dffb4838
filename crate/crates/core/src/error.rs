use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("timestep {t} out of range [{min}, {max}]")]
    TimestepOutOfRange { t: usize, min: usize, max: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid mixture: {0}")]
    InvalidMixture(String),

    #[error("unknown prompt id {0}")]
    UnknownPrompt(usize),

    #[error("missing condition: {0}")]
    MissingCondition(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: loss {loss} exceeds 10x initial {initial}")]
    TrainingDiverged { step: usize, loss: f64, initial: f64 },

    #[error("run aborted at step {step}: {reason}; config: {config}")]
    RunAborted {
        step: usize,
        reason: String,
        config: String,
    },

    #[error("malformed parameter file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(LabError::DimensionMismatch { expected, got })
    }
}
