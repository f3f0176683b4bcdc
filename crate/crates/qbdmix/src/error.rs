//! Crate-wide error type.

use thiserror::Error;

use crate::model::ValidationReport;

/// Errors raised anywhere in the QBD pipeline.
#[derive(Debug, Error)]
pub enum QbdError {
    /// Block shapes do not line up with the declared phase sizes.
    #[error("dimension mismatch at level {level}: {detail}")]
    Dimension { level: usize, detail: String },

    /// A model failed stochasticity / nonnegativity / irreducibility checks.
    #[error("model validation failed: {0}")]
    Validation(ValidationReport),

    /// Model file could not be parsed.
    #[error("model parse error: {0}")]
    Parse(String),

    /// An iterative solver ran out of its iteration budget.
    #[error(
        "{what} did not converge after {iterations} iterations (last residual {residual:.3e})"
    )]
    Nonconvergence {
        what: String,
        iterations: usize,
        residual: f64,
    },

    /// The homogeneous tail drifts upward (or is null recurrent).
    #[error("tail not positive recurrent: sp(R) = {spectral_radius}")]
    NotPositiveRecurrent { spectral_radius: f64 },

    /// A chain that must be irreducible is not.
    #[error("chain is reducible: {context}")]
    Reducible { context: String },

    /// A linear solve hit a (numerically) singular matrix.
    #[error("singular linear system: {context}")]
    Singular { context: String },

    /// Right-hand side violates the solvability condition of a singular system.
    #[error("inconsistent Poisson right-hand side: max |v0 g| = {max_violation:.3e}")]
    Inconsistent { max_violation: f64 },

    /// A stationary probability fell below the invertibility floor for diag(pi).
    #[error("stationary mass underflow at level {level}, phase {phase}: {value:.3e}")]
    StationaryUnderflow {
        level: usize,
        phase: usize,
        value: f64,
    },

    /// A simulated path exceeded its step cap.
    #[error("cap exceeded on {count} of {paths} paths (cap = {cap})")]
    CapExceeded {
        count: usize,
        paths: usize,
        cap: u64,
    },

    /// Bad argument outside the numeric domain of an operation.
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, QbdError>;
