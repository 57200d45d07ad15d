use thiserror::Error;

/// Errors raised by the solvers, simulators and verifiers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed measure: {0}")]
    Structure(String),

    #[error("moment integral diverged: {0}")]
    Divergence(String),

    #[error("unsupported measure: {0}")]
    UnsupportedMeasure(String),

    #[error("point {point:?} lies outside the evaluation domain")]
    Domain { point: Vec<f64> },

    #[error("growth mismatch: field grows with degree {field} but moments only hold up to order {order}")]
    Growth { field: u32, order: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("linear solve failed (condition estimate {condition:.3e}): {reason}")]
    Solver { reason: String, condition: f64 },

    #[error("Riccati equation has no positive definite solution; Hamiltonian spectrum {spectrum:?}")]
    Riccati { spectrum: Vec<f64> },

    #[error("policy left its admissible class at t={time}, x={state:?}: {detail}")]
    Admissibility {
        time: f64,
        state: Vec<f64>,
        detail: String,
    },

    #[error("ODE boundary selection failed: {0}")]
    Boundary(String),

    #[error("no sign change of the free-boundary gap on [0, {b_hi}]; samples {samples:?}")]
    Bracket { b_hi: f64, samples: Vec<(f64, f64)> },
}

pub type Result<T> = std::result::Result<T, Error>;
