use thiserror::Error;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("malformed record file {path}: {reason}")]
    MalformedRecord { path: String, reason: String },

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("privacy budget exceeded at step {step}: ε would reach {epsilon:.4} > target {target:.4}")]
    BudgetExceeded { step: u64, epsilon: f64, target: f64 },

    #[error("equivariance audit failed: {0}")]
    AuditFailed(String),

    #[error(transparent)]
    Core(#[from] equidp_core::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::AuditFailed(_) => 3,
            _ => 1,
        }
    }
}
