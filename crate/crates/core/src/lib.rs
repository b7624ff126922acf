//! Numerical laboratory for nonconvex mean-field optimal control.
//!
//! The library solves the limiting mean-field control (MFC) problem through
//! its forward-backward MFG system, classifies initial conditions by a
//! linear stability criterion, verifies master-equation and optimality
//! diagnostics, and measures the propagation-of-chaos rate of the associated
//! N-particle system.
//!
//! Core numerics are generic over the scalar type (`f32` / `f64`) through
//! the [`scalar::Real`] trait; concrete `f64` aliases are re-exported at the
//! crate root for everyday use.

pub mod error;
pub mod grid;
pub mod linearized;
pub mod measures;
pub mod mfg;
pub mod model;
pub mod particles;
pub mod pde;
pub mod scalar;
pub mod seeding;

pub use error::{Error, Result};
pub use scalar::Real;

// Concrete f64 aliases for the main domain types.
pub type SpaceTimeGrid64 = grid::SpaceTimeGrid<f64>;
pub type GridDensity64 = measures::GridDensity<f64>;
pub type DensityPath64 = measures::DensityPath<f64>;
pub type EmpiricalMeasure64 = measures::EmpiricalMeasure<f64>;
pub type Hamiltonian64 = model::Hamiltonian<f64>;
pub type Coupling64 = model::Coupling<f64>;
pub type ProblemSpec64 = model::ProblemSpec<f64>;
pub type ValueField64 = pde::ValueField<f64>;
pub type DriftField64 = pde::DriftField<f64>;
pub type MfgSolution64 = mfg::MfgSolution<f64>;
pub type MinimizerSet64 = mfg::MinimizerSet<f64>;
pub type StabilityReport64 = linearized::StabilityReport<f64>;
pub type ParticleEnsemble64 = particles::ParticleEnsemble<f64>;

// f32 variants of the grid-level types, for callers that trade precision
// for memory. The experiment drivers use f64 throughout.
pub type SpaceTimeGrid32 = grid::SpaceTimeGrid<f32>;
pub type GridDensity32 = measures::GridDensity<f32>;
pub type ValueField32 = pde::ValueField<f32>;
