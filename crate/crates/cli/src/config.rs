//! Experiment configuration: a flat, sectioned TOML file mapping one-to-one
//! onto the library's knobs.  Parsing round-trips (serialize -> parse ->
//! identical) and every referenced descriptor is validated before any work
//! starts.

use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub spec: SpecSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub initial: InitialSection,
    #[serde(default)]
    pub stability: StabilitySection,
    #[serde(default)]
    pub particles: ParticlesSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub verify: VerifySection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecSection {
    /// Builtin problem descriptor ("quadratic-free", "drifted", "two-well").
    pub descriptor: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub dim: usize,
    pub box_halfwidth: f64,
    pub nx: usize,
    pub t0: f64,
    pub t_final: f64,
    pub nt: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { dim: 1, box_halfwidth: 8.0, nx: 129, t0: 0.0, t_final: 1.0, nt: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub damping: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub multistarts: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self { damping: 0.5, max_iterations: 120, tolerance: 1e-6, multistarts: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialSection {
    /// Gaussian initial measure (truncated to the box).
    pub mean: f64,
    pub std: f64,
}

impl Default for InitialSection {
    fn default() -> Self {
        Self { mean: 0.0, std: 0.8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StabilitySection {
    pub sigma_grid: Vec<f64>,
    pub threshold: f64,
    /// Initial-measure family of the stability scan (means x stds grid).
    pub scan_means: Vec<f64>,
    pub scan_stds: Vec<f64>,
}

impl Default for StabilitySection {
    fn default() -> Self {
        Self {
            sigma_grid: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            threshold: 1e-6,
            scan_means: vec![-1.0, 0.0, 1.0],
            scan_stds: vec![0.6, 0.8, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParticlesSection {
    pub n_schedule: Vec<usize>,
    pub replicas: usize,
    /// Largest N of the exact small-N comparison (1..=3).
    pub small_n: usize,
    /// Sample points of the V^N-vs-U gap measurement.
    pub sample_points: usize,
    /// Seeded test fields of the second-order check.
    pub beta_count: usize,
}

impl Default for ParticlesSection {
    fn default() -> Self {
        Self {
            n_schedule: vec![8, 16, 32, 64, 128, 256, 512],
            replicas: 20,
            small_n: 2,
            sample_points: 50,
            beta_count: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub out_dir: String,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 0, out_dir: "out".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    /// Multiplies every verification tolerance (e.g. 0.01 tightens 100x).
    pub tolerance_scale: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self { tolerance_scale: 1.0 }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("config parse error: {e}"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
