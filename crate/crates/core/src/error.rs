use std::fmt;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FlowError>;

/// Which drift monitor tripped during integration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriftMonitor {
    /// `‖g1ᵀ g1 − I‖_F`
    Unitarity,
    /// strictly-lower Frobenius mass of `g2`, relative to `‖g2‖_F`
    Triangularity,
}

impl fmt::Display for DriftMonitor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DriftMonitor::Unitarity => f.write_str("unitarity"),
            DriftMonitor::Triangularity => f.write_str("triangularity"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value produced by {0}")]
    Numerical(String),

    #[error("rank deficient: {0}")]
    Rank(String),

    #[error("matrix is not symmetric (relative asymmetry {asymmetry:.3e})")]
    Symmetry { asymmetry: f64 },

    #[error("Jacobi iteration did not converge within {sweeps} sweeps")]
    Convergence { sweeps: usize },

    #[error("the Wegner generator is non-linear and has no constant matrix-eigenvalue")]
    NotDiagonalizable,

    #[error("step size underflow (dt = {dt:.3e}) at t = {t}")]
    Stiffness { t: f64, dt: f64 },

    #[error("{monitor} drift {value:.3e} exceeds bound {bound:.3e} at t = {t}")]
    Drift {
        monitor: DriftMonitor,
        value: f64,
        bound: f64,
        t: f64,
    },

    #[error("invalid flow state: {0}")]
    State(String),

    #[error("insufficient data for a rate fit: {usable} usable points, need at least 5")]
    InsufficientData { usable: usize },

    #[error("index out of range: {0}")]
    Index(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl FlowError {
    /// Stiffness, drift and non-finite failures of the numerics, as opposed
    /// to bad inputs.
    pub fn is_numerical_failure(&self) -> bool {
        matches!(
            self,
            FlowError::Numerical(_)
                | FlowError::Stiffness { .. }
                | FlowError::Drift { .. }
                | FlowError::Convergence { .. }
                | FlowError::Rank(_)
        )
    }
}
