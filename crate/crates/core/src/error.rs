//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty measure")]
    EmptyMeasure,

    #[error("bandwidth must be positive, got {0}")]
    InvalidBandwidth(f64),

    #[error("negative density value {value} at node {node}")]
    NegativeDensity { node: usize, value: f64 },

    #[error("mass leak: |mass - 1| = {leak:.3e} exceeds {limit:.1e} at step {step}")]
    MassLeak { step: usize, leak: f64, limit: f64 },

    #[error("boundary mass {mass:.3e} exceeds {limit:.1e}")]
    BoundaryMass { mass: f64, limit: f64 },

    #[error("solver blow-up at step {step}: sup-norm grew from {before:.3e} to {after:.3e}")]
    BlowUp { step: usize, before: f64, after: f64 },

    #[error("model assumption violated: {0}")]
    AssumptionViolated(String),

    #[error("Legendre transform Newton solve failed after {iterations} iterations (x = {x:?}, a = {a:?}, last residual {residual:.3e})")]
    LegendreNonConvergence {
        iterations: usize,
        x: Vec<f64>,
        a: Vec<f64>,
        residual: f64,
    },

    #[error("inadmissible (m, alpha) pair: Fokker-Planck residual {residual:.3e} exceeds {tolerance:.1e}")]
    InadmissiblePair { residual: f64, tolerance: f64 },

    #[error("no multistart converged ({attempted} attempted)")]
    NoStartConverged { attempted: usize },

    #[error("solution not converged: residual {residual:.3e} above tolerance {tolerance:.1e}")]
    NotConverged { residual: f64, tolerance: f64 },

    #[error("Picard iteration for the linearized system diverged after {iterations} iterations (residual {residual:.3e})")]
    LinearizedDivergence { iterations: usize, residual: f64 },

    #[error("operator assembly needs {required} entries, budget is {budget}; coarsen the grid or time mesh")]
    MemoryBudget { required: usize, budget: usize },

    #[error("signed mass drifted to {mass:.3e}, expected 0 within {limit:.1e}")]
    SignedMassDrift { mass: f64, limit: f64 },

    #[error("unknown problem descriptor {0:?}")]
    UnknownDescriptor(String),

    #[error("{0}")]
    Invalid(String),
}
