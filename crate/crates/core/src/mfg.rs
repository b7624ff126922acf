//! The mean-field control solver.
//!
//! Minimizers of the cost
//!
//! ```text
//!     J(m, alpha) = int int L(x, alpha) m dx dt + int F(m(t)) dt + G(m(T))
//! ```
//!
//! are computed through the forward-backward MFG system
//!
//! ```text
//!     -d_t u - Lap u + H(x, Du) = F(x, m(t)),   u(T) = G(x, m(T)),
//!      d_t m - Lap m - div(H_p(x, Du) m) = 0,   m(t0) = m0,
//! ```
//!
//! by damped Picard iteration with deterministic-plus-seeded multistarts;
//! converged runs are clustered to detect multiple minimizers.  The module
//! also evaluates the master-equation residual and empirical Lipschitz
//! diagnostics of the value function.

use crate::error::{Error, Result};
use crate::measures::{self, DensityPath, GridDensity};
use crate::model::ProblemSpec;
use crate::pde::{
    drift_from_value, laplacian, solve_fp_forward, solve_hjb_backward, solve_hjb_backward_raw,
    DriftField, ValueField,
};
use crate::scalar::Real;
use crate::seeding::stage_rng;
use rayon::prelude::*;

/// Cluster merge tolerance on `||Du1 - Du2||_inf` and `sup_t d1(m1, m2)`.
pub const CLUSTER_TOL: f64 = 1e-3;
/// Fokker-Planck replay tolerance for admissibility of an `(m, alpha)` pair.
pub const ADMISSIBILITY_TOL: f64 = 1e-6;

/// Solver parameters of the damped Picard iteration.
#[derive(Debug, Clone)]
pub struct SolverConfig<S: Real> {
    /// Initial damping `theta` of the measure update.
    pub damping: S,
    pub max_iterations: usize,
    /// Convergence threshold on `sup_t d1(m_next, m_cur)`.
    pub tolerance: S,
    /// Number of starts (first five deterministic, the rest seeded random).
    pub multistarts: usize,
    pub seed: u64,
}

impl<S: Real> Default for SolverConfig<S> {
    fn default() -> Self {
        Self {
            damping: S::of(0.5),
            max_iterations: 120,
            tolerance: S::of(1e-6),
            multistarts: 5,
            seed: 0,
        }
    }
}

/// One converged fixed point of the MFG system.
#[derive(Debug, Clone)]
pub struct MfgSolution<S: Real> {
    pub u: ValueField<S>,
    pub m: DensityPath<S>,
    pub alpha: DriftField<S>,
    pub cost: S,
    pub iterations: usize,
    pub fixed_point_residual: S,
    pub start_label: String,
    /// `sup_t M2(m(t)) / M2(m0)` (second-moment propagation diagnostic).
    pub moment_bound_ratio: S,
}

/// One equivalence class of converged runs.
#[derive(Debug, Clone)]
pub struct Cluster<S: Real> {
    /// Index of the cheapest member in `MinimizerSet::solutions`.
    pub representative: usize,
    pub members: Vec<usize>,
    pub cost: S,
}

/// All converged runs, grouped into clusters of numerically identical
/// minimizer candidates.
#[derive(Debug, Clone)]
pub struct MinimizerSet<S: Real> {
    pub solutions: Vec<MfgSolution<S>>,
    pub clusters: Vec<Cluster<S>>,
    pub global_min_cost: S,
}

impl<S: Real> MinimizerSet<S> {
    pub fn unique_cluster(&self) -> bool {
        self.clusters.len() == 1
    }

    pub fn best(&self) -> &MfgSolution<S> {
        &self.solutions[self.clusters[0].representative]
    }
}

/// `sup_t d1(a(t), b(t))` between two density paths.
pub fn path_distance<S: Real>(a: &DensityPath<S>, b: &DensityPath<S>) -> Result<S> {
    let mut worst = S::zero();
    for (sa, sb) in a.slices.iter().zip(&b.slices) {
        worst = worst.max(measures::wasserstein1(sa, sb)?);
    }
    Ok(worst)
}

fn sup_du_distance<S: Real>(a: &ValueField<S>, b: &ValueField<S>) -> S {
    let mut worst = S::zero();
    for (sa, sb) in a.du.iter().zip(&b.du) {
        for (ga, gb) in sa.iter().zip(sb) {
            worst = worst.max((ga[0] - gb[0]).abs().max((ga[1] - gb[1]).abs()));
        }
    }
    worst
}

/// Total cost of an admissible pair `(m, alpha)` by trapezoid quadrature.
///
/// Admissibility (m solves the discrete Fokker-Planck equation with drift
/// `alpha` from its own initial slice) is verified by replaying the forward
/// solver; an off-flow pair is rejected.
pub fn evaluate_cost<S: Real>(
    spec: &ProblemSpec<S>,
    m: &DensityPath<S>,
    alpha: &DriftField<S>,
) -> Result<S> {
    let grid = &spec.grid;
    let replay = solve_fp_forward(grid, &m.slices[0], alpha)?;
    let mut residual = S::zero();
    for (ra, rb) in replay.slices.iter().zip(&m.slices) {
        let l1: S = (0..grid.node_count())
            .map(|n| grid.weight(n) * (ra.values[n] - rb.values[n]).abs())
            .sum();
        residual = residual.max(l1);
    }
    if residual.as_f64() > ADMISSIBILITY_TOL {
        return Err(Error::InadmissiblePair {
            residual: residual.as_f64(),
            tolerance: ADMISSIBILITY_TOL,
        });
    }
    Ok(cost_quadrature(spec, m, alpha))
}

/// The cost integral itself (no admissibility replay).
fn cost_quadrature<S: Real>(spec: &ProblemSpec<S>, m: &DensityPath<S>, alpha: &DriftField<S>) -> S {
    let grid = &spec.grid;
    let half = S::of(0.5);
    let mut total = S::zero();
    for k in 0..grid.time_count() {
        let wt = if k == 0 || k == grid.nt { grid.dt * half } else { grid.dt };
        let slice = &m.slices[k];
        let lagr: S = (0..grid.node_count())
            .map(|n| {
                grid.weight(n)
                    * slice.values[n]
                    * spec.hamiltonian.legendre(grid.position(n), alpha.values[k][n])
            })
            .sum();
        total += wt * (lagr + spec.running.value_grid(slice));
    }
    total + spec.terminal.value_grid(m.terminal())
}

/// Multistart family of initial drift guesses.
fn start_drift<S: Real>(spec: &ProblemSpec<S>, index: usize, seed: u64) -> (String, DriftField<S>) {
    let grid = spec.grid.clone();
    let r = grid.box_halfwidth;
    match index {
        0 => ("zero".into(), DriftField::zero(grid)),
        1 => ("plus".into(), DriftField::from_fn(grid, |_, _| [S::of(0.75), S::zero()])),
        2 => ("minus".into(), DriftField::from_fn(grid, |_, _| [S::of(-0.75), S::zero()])),
        3 => (
            "inward".into(),
            DriftField::from_fn(grid, move |_, p| [-p[0] / r * S::of(0.5), -p[1] / r * S::of(0.5)]),
        ),
        4 => (
            "outward".into(),
            DriftField::from_fn(grid, move |_, p| [p[0] / r * S::of(0.5), p[1] / r * S::of(0.5)]),
        ),
        i => {
            let mut rng = stage_rng(seed, "multistart", i as u64);
            let c: Vec<S> = (0..3)
                .map(|_| S::uniform_01(&mut rng) - S::of(0.5))
                .collect();
            let pi_over_r = S::of(std::f64::consts::PI) / r;
            (
                format!("random-{i}"),
                DriftField::from_fn(grid, move |_, p| {
                    let v = c[0] + c[1] * p[0] / r + c[2] * (pi_over_r * p[0]).sin();
                    [v, S::zero()]
                }),
            )
        }
    }
}

fn finish_solution<S: Real>(
    spec: &ProblemSpec<S>,
    m0: &GridDensity<S>,
    m_path: &DensityPath<S>,
    iterations: usize,
    label: String,
) -> Result<MfgSolution<S>> {
    // Final consistent pass: the returned triple is admissible by
    // construction (m re-solved from alpha), with the residual measuring the
    // remaining fixed-point defect.
    let u = solve_hjb_backward(spec, m_path)?;
    let alpha = drift_from_value(&spec.hamiltonian, &u);
    let m = solve_fp_forward(&spec.grid, m0, &alpha)?;
    let fixed_point_residual = path_distance(&m, m_path)?;
    let cost = cost_quadrature(spec, &m, &alpha);
    let m2_0 = measures::moment(&m.slices[0], 2)?;
    let mut m2_sup = S::zero();
    for s in &m.slices {
        m2_sup = m2_sup.max(measures::moment(s, 2)?);
    }
    Ok(MfgSolution {
        u,
        m,
        alpha,
        cost,
        iterations,
        fixed_point_residual,
        start_label: label,
        moment_bound_ratio: m2_sup / m2_0.max(S::of(1e-30)),
    })
}

fn picard_from_start<S: Real>(
    spec: &ProblemSpec<S>,
    m0: &GridDensity<S>,
    config: &SolverConfig<S>,
    index: usize,
) -> Result<MfgSolution<S>> {
    let (label, alpha0) = start_drift(spec, index, config.seed);
    let mut m_path = solve_fp_forward(&spec.grid, m0, &alpha0)?;
    let mut theta = config.damping;
    let mut prev_residual = S::infinity();
    let mut growth_streak = 0usize;
    for it in 1..=config.max_iterations {
        let u = solve_hjb_backward(spec, &m_path)?;
        let alpha = drift_from_value(&spec.hamiltonian, &u);
        let m_hat = solve_fp_forward(&spec.grid, m0, &alpha)?;
        let mut next_slices = Vec::with_capacity(m_path.slices.len());
        for (cur, hat) in m_path.slices.iter().zip(&m_hat.slices) {
            let vals: Vec<S> = cur
                .values
                .iter()
                .zip(&hat.values)
                .map(|(&a, &b)| (S::one() - theta) * a + theta * b)
                .collect();
            let mut d = GridDensity { grid: spec.grid.clone(), values: vals };
            d.normalize()?;
            next_slices.push(d);
        }
        let next = DensityPath::new(spec.grid.clone(), next_slices)?;
        let residual = path_distance(&next, &m_path)?;
        m_path = next;
        if residual <= config.tolerance * theta.max(S::of(0.1)) {
            return finish_solution(spec, m0, &m_path, it, label);
        }
        // Oscillation guard: damp harder when the residual keeps growing.
        if residual > prev_residual {
            growth_streak += 1;
            if growth_streak >= 2 {
                theta *= S::of(0.5);
                growth_streak = 0;
                if theta < S::of(1e-3) {
                    break;
                }
            }
        } else {
            growth_streak = 0;
        }
        prev_residual = residual;
    }
    Err(Error::NotConverged {
        residual: prev_residual.as_f64(),
        tolerance: config.tolerance.as_f64(),
    })
}

/// Solves the MFC problem from `m0`; multistarts run in parallel and the
/// converged runs are clustered into distinct minimizer candidates.
pub fn solve_mfc<S: Real>(
    spec: &ProblemSpec<S>,
    m0: &GridDensity<S>,
    config: &SolverConfig<S>,
) -> Result<MinimizerSet<S>> {
    m0.check_boundary_mass()?;
    if spec.is_decoupled() {
        // Neither flat derivative depends on m: the fixed point is reached in
        // a single backward-forward pass.
        let grid = &spec.grid;
        let dummy = DensityPath::frozen(grid.clone(), m0);
        let terminal = spec.terminal_field(&dummy.slices[0]);
        let u = solve_hjb_backward_raw(spec, |k| spec.running_field(&dummy.slices[k.min(grid.nt)]), terminal)?;
        let alpha = drift_from_value(&spec.hamiltonian, &u);
        let m = solve_fp_forward(grid, m0, &alpha)?;
        let sol = finish_solution(spec, m0, &m, 1, "decoupled".into())?;
        let cost = sol.cost;
        return Ok(MinimizerSet {
            solutions: vec![sol],
            clusters: vec![Cluster { representative: 0, members: vec![0], cost }],
            global_min_cost: cost,
        });
    }

    let attempts: Vec<Result<MfgSolution<S>>> = (0..config.multistarts)
        .into_par_iter()
        .map(|i| picard_from_start(spec, m0, config, i))
        .collect();
    let solutions: Vec<MfgSolution<S>> = attempts.into_iter().filter_map(|r| r.ok()).collect();
    if solutions.is_empty() {
        return Err(Error::NoStartConverged { attempted: config.multistarts });
    }
    cluster_solutions(solutions)
}

fn cluster_solutions<S: Real>(solutions: Vec<MfgSolution<S>>) -> Result<MinimizerSet<S>> {
    let tol = S::of(CLUSTER_TOL);
    let mut clusters: Vec<Cluster<S>> = Vec::new();
    for (i, sol) in solutions.iter().enumerate() {
        let mut placed = false;
        for cl in clusters.iter_mut() {
            let rep = &solutions[cl.representative];
            let du = sup_du_distance(&sol.u, &rep.u);
            let dm = path_distance(&sol.m, &rep.m)?;
            if du <= tol && dm <= tol {
                cl.members.push(i);
                if sol.cost < cl.cost {
                    cl.cost = sol.cost;
                    cl.representative = i;
                }
                placed = true;
                break;
            }
        }
        if !placed {
            clusters.push(Cluster { representative: i, members: vec![i], cost: sol.cost });
        }
    }
    clusters.sort_by(|a, b| a.cost.partial_cmp(&b.cost).unwrap());
    let global_min_cost = clusters[0].cost;
    Ok(MinimizerSet { solutions, clusters, global_min_cost })
}

/// Value function `U(t0, m0)`: the global minimum over the detected clusters.
pub fn value_function<S: Real>(
    spec: &ProblemSpec<S>,
    m0: &GridDensity<S>,
    config: &SolverConfig<S>,
) -> Result<S> {
    Ok(solve_mfc(spec, m0, config)?.global_min_cost)
}

/// Residual of the master Hamilton-Jacobi equation
/// `-d_t U - int Lap_y u dm + int H(y, Du) dm - F(m) = 0` at time index `k`,
/// with `D_m U(t, m(t), y)` realized as `Du(t, y)` from the base solution.
///
/// The time derivative is a one-sided difference of re-solved values with the
/// measure frozen: `[U(t + dt, m(t)) - U(t, m(t))] / dt`.
pub fn master_equation_residual<S: Real>(
    spec: &ProblemSpec<S>,
    set: &MinimizerSet<S>,
    config: &SolverConfig<S>,
    k: usize,
) -> Result<S> {
    if !set.unique_cluster() {
        return Err(Error::Invalid(
            "master-equation residual needs a unique-cluster solution".into(),
        ));
    }
    let sol = set.best();
    let grid = &spec.grid;
    if k + 9 > grid.nt {
        return Err(Error::InvalidGrid(format!(
            "time index {k} leaves too little horizon for the restricted solves"
        )));
    }
    let m_t = &sol.m.slices[k];

    // U(t, m(t)) and U(t + dt, m(t)): restricted problems with frozen datum.
    let spec_a = spec.restrict_from(k)?;
    let spec_b = spec.restrict_from(k + 1)?;
    let m_a = GridDensity { grid: spec_a.grid.clone(), values: m_t.values.clone() };
    let m_b = GridDensity { grid: spec_b.grid.clone(), values: m_t.values.clone() };
    let u_a = value_function(&spec_a, &m_a, config)?;
    let u_b = value_function(&spec_b, &m_b, config)?;
    let dt_u = (u_b - u_a) / grid.dt;

    let lap_u = laplacian(grid, &sol.u.slices[k]);
    let mut lap_term = S::zero();
    let mut ham_term = S::zero();
    for n in 0..grid.node_count() {
        let w = grid.weight(n) * m_t.values[n];
        lap_term += w * lap_u[n];
        ham_term += w * spec.hamiltonian.h(grid.position(n), sol.u.du[k][n]);
    }
    let residual = -dt_u - lap_term + ham_term - spec.running.value_grid(m_t);
    Ok(residual.abs())
}

/// Dynamic-programming defect
/// `|U(t0, m0) - [running cost on [t0, t1]] - U(t1, m(t1))|` at time index `k1`.
pub fn dynamic_programming_gap<S: Real>(
    spec: &ProblemSpec<S>,
    set: &MinimizerSet<S>,
    config: &SolverConfig<S>,
    k1: usize,
) -> Result<S> {
    let sol = set.best();
    let grid = &spec.grid;
    let half = S::of(0.5);
    // Trapezoid quadrature of the running cost over [t0, t_{k1}]; the split
    // at a grid node is exact (half weights from each side sum to dt).
    let mut partial = S::zero();
    for k in 0..=k1 {
        let wt = if k == 0 || k == k1 { grid.dt * half } else { grid.dt };
        let slice = &sol.m.slices[k];
        let lagr: S = (0..grid.node_count())
            .map(|n| {
                grid.weight(n)
                    * slice.values[n]
                    * spec.hamiltonian.legendre(grid.position(n), sol.alpha.values[k][n])
            })
            .sum();
        partial += wt * (lagr + spec.running.value_grid(slice));
    }
    let spec_r = spec.restrict_from(k1)?;
    let m1 = GridDensity { grid: spec_r.grid.clone(), values: sol.m.slices[k1].values.clone() };
    let tail = value_function(&spec_r, &m1, config)?;
    Ok((set.global_min_cost - partial - tail).abs())
}

/// A perturbation of the initial measure for the Lipschitz diagnostics.
#[derive(Debug, Clone)]
pub enum Perturbation<S: Real> {
    Shift(S),
    VarianceScale(S),
    Bump { amp: S, center: S, width: S },
}

impl<S: Real> Perturbation<S> {
    pub fn apply(&self, m0: &GridDensity<S>) -> Result<GridDensity<S>> {
        let grid = &m0.grid;
        let values: Vec<S> = match self {
            Self::Shift(dx) => (0..grid.node_count())
                .map(|n| {
                    let mut p = grid.position(n);
                    p[0] -= *dx;
                    grid.interpolate(&m0.values, p).max(S::zero())
                })
                .collect(),
            Self::VarianceScale(f) => {
                let mu = m0.mean();
                (0..grid.node_count())
                    .map(|n| {
                        let p = grid.position(n);
                        let q = [
                            mu[0] + (p[0] - mu[0]) / *f,
                            mu[1] + (p[1] - mu[1]) / *f,
                        ];
                        grid.interpolate(&m0.values, q).max(S::zero())
                    })
                    .collect()
            }
            Self::Bump { amp, center, width } => (0..grid.node_count())
                .map(|n| {
                    let x = grid.position(n)[0];
                    let b = *amp * (-((x - *center) / *width).powi(2) * S::of(0.5)).exp();
                    (m0.values[n] + b).max(S::zero())
                })
                .collect(),
        };
        GridDensity::new(grid.clone(), values)
    }
}

/// Outcome of one perturbed solve in the Lipschitz diagnostics.
#[derive(Debug, Clone)]
pub struct LipschitzSample<S: Real> {
    pub description: String,
    /// `d2(m0, m0_perturbed)`
    pub initial_distance: S,
    /// `(||Du1 - Du2||_inf + sup_t d2(m1, m2)) / d2(m0, m0')`, when unique.
    pub ratio: Option<S>,
    /// Perturbed problem produced several clusters (boundary-of-O flag).
    pub multiple_clusters: bool,
}

/// Empirical Lipschitz report for `D_m U` around `m0`.
#[derive(Debug, Clone)]
pub struct LipschitzReport<S: Real> {
    pub samples: Vec<LipschitzSample<S>>,
    /// Max finite ratio: the empirical constant `C`.
    pub empirical_constant: S,
}

pub fn lipschitz_diagnostics<S: Real>(
    spec: &ProblemSpec<S>,
    m0: &GridDensity<S>,
    perturbations: &[Perturbation<S>],
    config: &SolverConfig<S>,
) -> Result<LipschitzReport<S>> {
    let base = solve_mfc(spec, m0, config)?;
    if !base.unique_cluster() {
        return Err(Error::Invalid(
            "Lipschitz diagnostics need a unique-cluster base".into(),
        ));
    }
    let base_sol = base.best();
    let mut samples = Vec::new();
    let mut empirical = S::zero();
    for p in perturbations {
        let m0p = p.apply(m0)?;
        let d0 = measures::wasserstein2(m0, &m0p)?;
        let description = format!("{p:?}");
        // Threshold sized above the atom-merge noise floor of the discrete
        // transport distance (~1e-9 for identical grid densities).
        if d0 <= S::of(1e-7) {
            // Zero perturbation: the 0/0 ratio is excluded by contract.
            samples.push(LipschitzSample {
                description,
                initial_distance: d0,
                ratio: None,
                multiple_clusters: false,
            });
            continue;
        }
        let set = solve_mfc(spec, &m0p, config)?;
        if !set.unique_cluster() {
            samples.push(LipschitzSample {
                description,
                initial_distance: d0,
                ratio: None,
                multiple_clusters: true,
            });
            continue;
        }
        let sol = set.best();
        let du = sup_du_distance(&sol.u, &base_sol.u);
        let mut dm = S::zero();
        for (a, b) in sol.m.slices.iter().zip(&base_sol.m.slices) {
            dm = dm.max(measures::wasserstein2(a, b)?);
        }
        let ratio = (du + dm) / d0;
        empirical = empirical.max(ratio);
        samples.push(LipschitzSample {
            description,
            initial_distance: d0,
            ratio: Some(ratio),
            multiple_clusters: false,
        });
    }
    Ok(LipschitzReport { samples, empirical_constant: empirical })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::SpaceTimeGrid;
    use crate::model::{builtin, Coupling, Hamiltonian, SpatialFn};
    use approx::assert_abs_diff_eq;
    use std::sync::Arc;

    fn grid() -> Arc<SpaceTimeGrid<f64>> {
        SpaceTimeGrid::line(8.0, 129, 0.0, 1.0, 32).unwrap()
    }

    fn gaussian(g: &Arc<SpaceTimeGrid<f64>>) -> GridDensity<f64> {
        GridDensity::gaussian(g.clone(), [0.0, 0.0], [0.8, 1.0]).unwrap()
    }

    #[test]
    fn zero_data_cost_is_zero() {
        let g = grid();
        let spec = ProblemSpec::new(
            "free",
            Hamiltonian::quadratic(1),
            Coupling::Zero,
            Coupling::Linear { g: SpatialFn::Zero },
            g.clone(),
        )
        .unwrap();
        let set = solve_mfc(&spec, &gaussian(&g), &SolverConfig::default()).unwrap();
        assert_eq!(set.solutions[0].iterations, 1);
        assert!(set.unique_cluster());
        assert_abs_diff_eq!(set.global_min_cost, 0.0, epsilon = 1e-10);
    }

    #[test]
    fn decoupled_value_matches_multiplier_representation() {
        // G linear: U(t0, m0) = int u(t0, .) dm0.
        let g = grid();
        let spec = builtin(g.clone(), "quadratic-free").unwrap();
        let m0 = gaussian(&g);
        let set = solve_mfc(&spec, &m0, &SolverConfig::default()).unwrap();
        let sol = set.best();
        let rep: f64 = (0..g.node_count())
            .map(|n| g.weight(n) * sol.u.slices[0][n] * m0.values[n])
            .sum();
        assert!(
            (set.global_min_cost - rep).abs() < 1e-3,
            "cost {} vs representation {rep}",
            set.global_min_cost
        );
    }

    #[test]
    fn evaluate_cost_rejects_inadmissible_pairs() {
        let g = grid();
        let spec = builtin(g.clone(), "quadratic-free").unwrap();
        let m0 = gaussian(&g);
        // A frozen path does not solve FP with the nonzero optimal drift.
        let frozen = DensityPath::frozen(g.clone(), &m0);
        let drift = DriftField::from_fn(g.clone(), |_, _| [1.0, 0.0]);
        assert!(matches!(
            evaluate_cost(&spec, &frozen, &drift),
            Err(Error::InadmissiblePair { .. })
        ));
        // The solver's own pair is admissible.
        let set = solve_mfc(&spec, &m0, &SolverConfig::default()).unwrap();
        let sol = set.best();
        let c = evaluate_cost(&spec, &sol.m, &sol.alpha).unwrap();
        assert_abs_diff_eq!(c, sol.cost, epsilon = 1e-12);
    }

    #[test]
    fn two_well_finds_two_clusters_from_symmetric_start() {
        let g = grid();
        let spec = builtin(g.clone(), "two-well").unwrap();
        let set = solve_mfc(&spec, &gaussian(&g), &SolverConfig::default()).unwrap();
        assert!(
            set.clusters.len() >= 2,
            "expected symmetric minimizer pair, got {} cluster(s)",
            set.clusters.len()
        );
        let c0 = set.clusters[0].cost;
        let c1 = set.clusters[1].cost;
        assert!((c0 - c1).abs() < 1e-4, "symmetric costs differ: {c0} vs {c1}");
        // every cluster cost >= global minimum by construction
        for c in &set.clusters {
            assert!(c.cost >= set.global_min_cost - 1e-9);
        }
    }

    #[test]
    fn first_order_condition_along_solution() {
        let g = grid();
        let spec = builtin(g.clone(), "drifted").unwrap();
        let set = solve_mfc(&spec, &gaussian(&g), &SolverConfig::default()).unwrap();
        let sol = set.best();
        // D_alpha L(x, alpha) = -Du node-wise
        for k in (0..g.time_count()).step_by(7) {
            for n in (0..g.node_count()).step_by(11) {
                let la = spec.hamiltonian.l_alpha(g.position(n), sol.alpha.values[k][n]);
                assert_abs_diff_eq!(la[0], -sol.u.du[k][n][0], epsilon = 1e-8);
            }
        }
        // moment propagation diagnostic is finite and reported
        assert!(sol.moment_bound_ratio.is_finite() && sol.moment_bound_ratio > 0.0);
    }

    #[test]
    fn master_residual_is_small_and_shrinks() {
        let g = grid();
        let spec = builtin(g.clone(), "quadratic-free").unwrap();
        let cfg = SolverConfig::default();
        let set = solve_mfc(&spec, &gaussian(&g), &cfg).unwrap();
        let r_mid = master_equation_residual(&spec, &set, &cfg, g.nt / 2).unwrap();
        // latest index compatible with the 8-step restriction floor
        let r_late = master_equation_residual(&spec, &set, &cfg, g.nt - 9).unwrap();
        assert!(r_mid < 0.05, "mid-horizon master residual {r_mid}");
        // same order of magnitude, no boundary-layer blow-up
        assert!(r_late < 10.0 * r_mid.max(1e-3), "late residual {r_late} vs mid {r_mid}");
    }

    #[test]
    fn dpp_gap_is_small() {
        let g = grid();
        let spec = builtin(g.clone(), "quadratic-free").unwrap();
        let cfg = SolverConfig::default();
        let set = solve_mfc(&spec, &gaussian(&g), &cfg).unwrap();
        let gap = dynamic_programming_gap(&spec, &set, &cfg, g.nt / 2).unwrap();
        assert!(gap < 2e-3, "DPP gap {gap}");
    }

    #[test]
    fn lipschitz_diagnostics_translation() {
        let g = grid();
        let spec = builtin(g.clone(), "quadratic-free").unwrap();
        let cfg = SolverConfig::default();
        let report = lipschitz_diagnostics(
            &spec,
            &gaussian(&g),
            &[
                Perturbation::Shift(0.0),
                Perturbation::Shift(0.01),
                Perturbation::Shift(0.005),
            ],
            &cfg,
        )
        .unwrap();
        assert!(report.samples[0].ratio.is_none(), "zero perturbation must be excluded");
        let r1 = report.samples[1].ratio.unwrap();
        let r2 = report.samples[2].ratio.unwrap();
        assert!(r1.is_finite() && r1 > 0.0);
        // stability under halving the shift: within a factor 2
        assert!(r2 < 2.0 * r1 && r1 < 2.0 * r2, "ratios {r1} vs {r2}");
    }
}
