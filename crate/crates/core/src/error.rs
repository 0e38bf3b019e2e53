use thiserror::Error;

pub type Result<T> = std::result::Result<T, GscError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GscError {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("Newton inversion did not converge (residual {residual:.3e}, last iterate {last:?})")]
    NoConvergence { residual: f64, last: Vec<f64> },

    #[error("Hessian is singular or ill-conditioned (condition {condition:.3e})")]
    SingularHessian { condition: f64 },

    #[error("threshold scan does not bracket a transition: predicate is {value} at both ends of [{lo}, {hi}]")]
    NonBracketing { lo: f64, hi: f64, value: bool },

    #[error("no stable fixed point found")]
    NoStableSolution,
}

impl GscError {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        GscError::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
