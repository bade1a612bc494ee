//! Error types shared by the whole crate.

use thiserror::Error;

/// Errors produced by model evaluation, belief propagation, constraint
/// transformation and the solver.
#[derive(Error, Debug)]
pub enum CilqgError {
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("matrix is not positive semidefinite (min eigenvalue {min_eig:.3e})")]
    NotPsd { min_eig: f64 },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("probability {p} outside valid range {range}")]
    BadProbability { p: f64, range: &'static str },

    #[error("model domain error: {0}")]
    Domain(String),

    #[error("innovation covariance is numerically singular (condition {cond:.3e})")]
    SingularInnovation { cond: f64 },

    #[error("constraint gradient is not finite at the linearization point")]
    NonFiniteGradient,

    #[error("cost derivative is not finite at the expansion point")]
    NonFiniteDerivative,

    #[error("nominal state lies inside obstacle {index} (signed distance {phi:.4})")]
    NominalInsideObstacle { index: usize, phi: f64 },

    #[error("ego and obstacle centers coincide at step {step}")]
    CoincidentCenters { step: usize },

    #[error("control box is empty after tightening on channel {channel}")]
    EmptyBox { channel: usize },

    #[error("Q_uu is not positive definite (regularization {rho:.3e})")]
    NotPositiveDefinite { rho: f64 },

    #[error("line search failed after {trials} backtracking steps")]
    LineSearchFailed { trials: usize },

    #[error("barrier evaluated outside its domain (constraint value {value:.4e} >= 0)")]
    BarrierDomain { value: f64 },

    #[error("initial trajectory is infeasible and recovery failed: {0}")]
    InfeasibleStart(String),

    #[error("solver made no progress: {reason}")]
    NoProgress {
        reason: String,
        best: Box<crate::solver::PlanResult>,
    },

    #[error("scenario schema error at `{field}`: {message}")]
    Schema { field: String, message: String },

    #[error("scenario invariant violated: {0}")]
    Invariant(String),

    #[error("bad parameters: {0}")]
    BadParams(String),
}

pub type Result<T> = std::result::Result<T, CilqgError>;
