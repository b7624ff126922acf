//! Particle-level simulations: the mean-field-feedback system `X^N`, i.i.d.
//! McKean-Vlasov particles, the exact small-N optimal control `Y^N` from the
//! N-agent value function `V^N`, and the propagation-of-chaos experiment.
//!
//! All particle systems share one Euler-Maruyama kernel
//!
//! ```text
//!     X_{k+1} = X_k + dt b(t_k, X_k) + sqrt(2 dt) xi_k,
//! ```
//!
//! reflected at the walls of the box (exit counts are reported and must be
//! zero for a run to count as fully valid).  For the mean-field-feedback
//! system the measure argument of the decentralized drift is approximated by
//! freezing `Du` of the base solution while `d_2(m^N_t, m(t))` stays inside
//! a tracked neighborhood; the first exit time is recorded as a truncation
//! flag rather than an error, mirroring the stopped process of the theory.

use crate::error::{Error, Result};
use crate::grid::SpaceTimeGrid;
use crate::measures::{wasserstein2, DensityPath, EmpiricalMeasure, GridDensity};
use crate::mfg::MfgSolution;
use crate::model::ProblemSpec;
use crate::scalar::Real;
use crate::seeding::stage_rng;
use rayon::prelude::*;
use std::sync::Arc;

/// Node budget (values plus gradients, all time slices) of the tensor-grid
/// small-N value solve.
pub const TENSOR_BUDGET: usize = 60_000_000;
/// Maximum fraction of errored replicas the chaos experiment tolerates.
pub const EXCLUSION_LIMIT: f64 = 0.2;
/// Default tracked-neighborhood radius of the mean-field-feedback system
/// when the caller does not measure a noise floor.
pub const DELTA_TRACK_DEFAULT: f64 = 0.5;

/// Discrete particle trajectories `trajectories[particle][time index]`.
#[derive(Debug, Clone)]
pub struct ParticleEnsemble<S: Real> {
    pub n: usize,
    pub dim: usize,
    pub trajectories: Vec<Vec<[S; 2]>>,
    pub noise_seed: u64,
    pub dt: S,
    /// Number of wall reflections over the whole run (0 for a valid run).
    pub exit_count: usize,
    /// First time index at which the tracked neighborhood was left, if any.
    pub truncated_at: Option<usize>,
}

impl<S: Real> ParticleEnsemble<S> {
    pub fn positions_at(&self, k: usize) -> Vec<[S; 2]> {
        self.trajectories.iter().map(|path| path[k]).collect()
    }

    pub fn empirical_at(&self, k: usize) -> Result<EmpiricalMeasure<S>> {
        EmpiricalMeasure::new(self.dim, self.positions_at(k))
    }
}

/// Result of the propagation-of-chaos rate measurement.
#[derive(Debug, Clone)]
pub struct ChaosExperimentResult<S: Real> {
    pub n_values: Vec<usize>,
    /// Monte-Carlo mean of `sup_t d_1(m^N_t, m(t))` per N.
    pub errors: Vec<S>,
    /// 95% confidence half-widths of the means.
    pub ci_halfwidths: Vec<S>,
    /// Replicas that completed per N (errored replicas are excluded).
    pub replicas_used: Vec<usize>,
    pub excluded: usize,
    /// Slope `gamma_hat` of `-log error` vs `log N`.
    pub fitted_rate: f64,
    /// Constant `C_hat` with `error ~ C_hat N^{-gamma_hat}`.
    pub fitted_constant: f64,
    pub r_squared: f64,
}

impl<S: Real> ChaosExperimentResult<S> {
    /// Smallest constant `C` with `error_i <= C N_i^{-1/9}` across the
    /// schedule (the finite-constant envelope of the i.i.d. sampling bound
    /// in dimension 1).
    pub fn n_ninth_envelope(&self) -> f64 {
        self.n_values
            .iter()
            .zip(&self.errors)
            .map(|(&n, &e)| e.as_f64() * (n as f64).powf(1.0 / 9.0))
            .fold(0.0, f64::max)
    }
}

/// N-agent value function on the tensor grid `[-R, R]^N` (1D base space).
#[derive(Debug, Clone)]
pub struct SmallNValue<S: Real> {
    pub n: usize,
    pub grid: Arc<SpaceTimeGrid<S>>,
    /// `values[k][flat]`, flat index `sum_j i_j nx^j` over the tensor grid.
    pub values: Vec<Vec<S>>,
    /// Central-difference gradients `gradients[k][flat][j] = D_{x_j} V^N`.
    pub gradients: Vec<Vec<[S; 3]>>,
    /// Diagnostic `N sup_{t, x, j} |D_{x_j} V^N|` (uniform-Lipschitz bound).
    pub lipschitz_diagnostic: S,
}

impl<S: Real> SmallNValue<S> {
    fn flat_index(&self, idx: &[usize]) -> usize {
        let nx = self.grid.nx;
        idx.iter().rev().fold(0, |acc, &i| acc * nx + i)
    }

    /// Multilinear interpolation of `V^N(t_k, x)` at an N-tuple of
    /// coordinates (clamped to the box).
    pub fn interpolate(&self, k: usize, x: &[S]) -> S {
        self.interpolate_slice(&self.values[k], x)
    }

    fn interpolate_slice(&self, slice: &[S], x: &[S]) -> S {
        let g = &self.grid;
        let r = g.box_halfwidth;
        let mut cells = [0usize; 3];
        let mut fracs = [S::zero(); 3];
        for j in 0..self.n {
            let xc = x[j].max(-r).min(r);
            let s = (xc + r) / g.dx;
            let i = (s.floor().as_f64() as usize).min(g.nx - 2);
            cells[j] = i;
            fracs[j] = s - S::from_usize(i).unwrap();
        }
        let mut total = S::zero();
        for corner in 0..(1usize << self.n) {
            let mut w = S::one();
            let mut idx = [0usize; 3];
            for j in 0..self.n {
                if corner >> j & 1 == 1 {
                    idx[j] = cells[j] + 1;
                    w *= fracs[j];
                } else {
                    idx[j] = cells[j];
                    w *= S::one() - fracs[j];
                }
            }
            total += w * slice[self.flat_index(&idx[..self.n])];
        }
        total
    }

    /// Interpolated gradient component `D_{x_j} V^N(t_k, x)`.
    pub fn gradient_component(&self, k: usize, x: &[S], j: usize) -> S {
        let comp: Vec<S> = self.gradients[k].iter().map(|g| g[j]).collect();
        self.interpolate_slice(&comp, x)
    }
}

fn reflect_into_box<S: Real>(x: S, r: S, exits: &mut usize) -> S {
    let mut v = x;
    let mut bounced = false;
    for _ in 0..64 {
        if v > r {
            v = r + r - v;
            bounced = true;
        } else if v < -r {
            v = -r - r - v;
            bounced = true;
        } else {
            break;
        }
    }
    if bounced {
        *exits += 1;
    }
    v.max(-r).min(r)
}

/// Shared Euler-Maruyama kernel.  `drift(k, x)` is the frozen per-step
/// velocity; `track` monitors `d_2` of the empirical measure against a
/// reference flow and records the first exit from the `delta`-neighborhood.
fn simulate_with_drift<S: Real>(
    grid: &Arc<SpaceTimeGrid<S>>,
    m0: &GridDensity<S>,
    drift: impl Fn(usize, [S; 2]) -> [S; 2],
    n: usize,
    seed: u64,
    track: Option<(&DensityPath<S>, S)>,
) -> Result<ParticleEnsemble<S>> {
    if n == 0 {
        return Err(Error::Invalid("particle count must be positive".into()));
    }
    let dim = grid.dim;
    let r = grid.box_halfwidth;
    let mut init_rng = stage_rng(seed, "particle-init", 0);
    let mut noise_rng = stage_rng(seed, "particle-noise", 0);
    let mut positions: Vec<[S; 2]> = (0..n).map(|_| m0.sample(&mut init_rng)).collect();
    let mut trajectories: Vec<Vec<[S; 2]>> = positions.iter().map(|&p| vec![p]).collect();
    let mut exit_count = 0usize;
    let mut truncated_at = None;
    let root_2dt = (S::of(2.0) * grid.dt).sqrt();
    for k in 0..grid.nt {
        for (j, p) in positions.iter_mut().enumerate() {
            let b = drift(k, *p);
            for axis in 0..dim {
                let noise = S::std_normal(&mut noise_rng);
                let moved = p[axis] + grid.dt * b[axis] + root_2dt * noise;
                p[axis] = reflect_into_box(moved, r, &mut exit_count);
            }
            trajectories[j].push(*p);
        }
        if let Some((reference, delta)) = track {
            if truncated_at.is_none() {
                let emp = EmpiricalMeasure::new(dim, positions.clone())?;
                let d2 = wasserstein2(&emp, &reference.slices[k + 1])?;
                if d2 >= delta {
                    truncated_at = Some(k + 1);
                }
            }
        }
    }
    Ok(ParticleEnsemble {
        n,
        dim,
        trajectories,
        noise_seed: seed,
        dt: grid.dt,
        exit_count,
        truncated_at,
    })
}

/// Per-slice component arrays of a drift field, for cheap interpolation.
fn drift_components<S: Real>(sol: &MfgSolution<S>) -> (Vec<Vec<S>>, Vec<Vec<S>>) {
    let ax = sol.alpha.values.iter().map(|s| s.iter().map(|v| v[0]).collect()).collect();
    let ay = sol.alpha.values.iter().map(|s| s.iter().map(|v| v[1]).collect()).collect();
    (ax, ay)
}

/// N i.i.d. McKean-Vlasov particles along the base solution: drift
/// `alpha(t, x) = -H_p(x, Du(t, x))` interpolated from the solved feedback,
/// driven by independent Brownian motions.
pub fn simulate_mckean_vlasov<S: Real>(
    spec: &ProblemSpec<S>,
    sol: &MfgSolution<S>,
    n: usize,
    seed: u64,
) -> Result<ParticleEnsemble<S>> {
    let grid = &spec.grid;
    let (ax, ay) = drift_components(sol);
    let m0 = &sol.m.slices[0];
    simulate_with_drift(
        grid,
        m0,
        |k, p| {
            [
                grid.interpolate(&ax[k], p),
                if grid.dim == 2 { grid.interpolate(&ay[k], p) } else { S::zero() },
            ]
        },
        n,
        seed,
        None,
    )
}

/// Mean-field-feedback system `X^N`: the decentralized drift evaluated at the
/// empirical measure, approximated by the base `Du` while
/// `d_2(m^N_t, m(t)) < delta_track`.  The first exit of the tracked
/// neighborhood is recorded in `truncated_at`; the run is kept and flagged.
///
/// With the same seed this produces exactly the trajectories of
/// [`simulate_mckean_vlasov`] (same discrete recursion, same noise stream).
pub fn simulate_meanfield_feedback<S: Real>(
    spec: &ProblemSpec<S>,
    sol: &MfgSolution<S>,
    n: usize,
    seed: u64,
    delta_track: S,
) -> Result<ParticleEnsemble<S>> {
    let grid = &spec.grid;
    let (ax, ay) = drift_components(sol);
    let m0 = &sol.m.slices[0];
    simulate_with_drift(
        grid,
        m0,
        |k, p| {
            [
                grid.interpolate(&ax[k], p),
                if grid.dim == 2 { grid.interpolate(&ay[k], p) } else { S::zero() },
            ]
        },
        n,
        seed,
        Some((&sol.m, delta_track)),
    )
}

/// Exact `d_1` in 1D between a particle cloud and a grid density with
/// piecewise-linear CDF: `int |F_emp - F_grid| dx`, breakpoints merged.
pub fn w1_particles_vs_grid<S: Real>(points: &[S], density: &GridDensity<S>) -> Result<S> {
    let g = &density.grid;
    if g.dim != 1 {
        return Err(Error::Invalid("exact particle-grid d_1 needs a 1D grid".into()));
    }
    if points.is_empty() {
        return Err(Error::EmptyMeasure);
    }
    let mut sorted: Vec<S> = points.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // Grid CDF at the nodes (cumulative trapezoid cell masses, normalized).
    let mut cdf = vec![S::zero(); g.nx];
    for i in 1..g.nx {
        cdf[i] = cdf[i - 1]
            + (density.values[i - 1] + density.values[i]) * S::of(0.5) * g.dx;
    }
    let total = cdf[g.nx - 1];
    if total <= S::zero() {
        return Err(Error::EmptyMeasure);
    }
    for c in cdf.iter_mut() {
        *c /= total;
    }
    let grid_cdf = |x: S| -> S {
        let r = g.box_halfwidth;
        if x <= -r {
            return S::zero();
        }
        if x >= r {
            return S::one();
        }
        let s = (x + r) / g.dx;
        let i = (s.floor().as_f64() as usize).min(g.nx - 2);
        let f = s - S::from_usize(i).unwrap();
        cdf[i] * (S::one() - f) + cdf[i + 1] * f
    };
    // Breakpoints: all nodes and all particle positions (clamped).
    let n = sorted.len();
    let wn = S::one() / S::from_usize(n).unwrap();
    let mut breaks: Vec<S> = (0..g.nx).map(|i| g.axis(i)).collect();
    breaks.extend(sorted.iter().map(|&p| p.max(-g.box_halfwidth).min(g.box_halfwidth)));
    breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    breaks.dedup_by(|a, b| *a == *b);
    let emp_cdf = |x: S| -> S {
        // fraction of particles <= x
        let mut lo = 0usize;
        let mut hi = n;
        while lo < hi {
            let mid = (lo + hi) / 2;
            if sorted[mid] <= x {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        S::from_usize(lo).unwrap() * wn
    };
    // On each segment F_emp is constant and F_grid is linear, so the
    // difference is linear; integrate |linear| exactly (split at the root).
    let mut d1 = S::zero();
    for w in breaks.windows(2) {
        let (a, b) = (w[0], w[1]);
        let len = b - a;
        if len <= S::zero() {
            continue;
        }
        let fe = emp_cdf(a + len * S::of(0.5)); // constant inside the open segment
        let da = grid_cdf(a) - fe;
        let db = grid_cdf(b) - fe;
        let seg = if da * db >= S::zero() {
            (da.abs() + db.abs()) * S::of(0.5) * len
        } else {
            let root = da / (da - db); // fraction where the difference vanishes
            (da.abs() * root + db.abs() * (S::one() - root)) * S::of(0.5) * len
        };
        d1 += seg;
    }
    Ok(d1)
}

/// Tensor-grid solve of the N-agent Hamilton-Jacobi-Bellman equation
/// (`N <= 3`, 1D base space):
///
/// ```text
///     -d_t V - sum_j Lap_{x_j} V + (1/N) sum_j H(x_j, N D_{x_j} V)
///        = F(m^N_x),    V(T, x) = G(m^N_x),
/// ```
///
/// with the empirical-measure couplings evaluated exactly on atom clouds and
/// the terminal datum symmetrized over index permutations.  The scheme is
/// the same explicit-Engquist-Osher / implicit-diffusion splitting as the
/// base 1D solver, so `N = 1` reproduces it to machine precision.
pub fn solve_vn_small<S: Real>(spec: &ProblemSpec<S>, n: usize) -> Result<SmallNValue<S>> {
    let g = &spec.grid;
    if g.dim != 1 {
        return Err(Error::Invalid("small-N value solve needs a 1D base space".into()));
    }
    if !(1..=3).contains(&n) {
        return Err(Error::Invalid(format!("small-N value solve supports N in 1..=3, got {n}")));
    }
    let nx = g.nx;
    let total = nx.pow(n as u32);
    let cost = total * g.time_count() * 4; // values + up to 3 gradient planes
    if cost > TENSOR_BUDGET {
        return Err(Error::MemoryBudget { required: cost, budget: TENSOR_BUDGET });
    }
    let nf = S::from_usize(n).unwrap();
    let wn = S::one() / nf;
    let weights = vec![wn; n];
    let coords = |flat: usize| -> Vec<usize> {
        let mut rem = flat;
        (0..n)
            .map(|_| {
                let i = rem % nx;
                rem /= nx;
                i
            })
            .collect()
    };
    let cloud_points = |idx: &[usize]| -> Vec<[S; 2]> {
        idx.iter().map(|&i| [g.axis(i), S::zero()]).collect()
    };
    // Couplings at the empirical measure of each tensor node; symmetric in
    // the particle coordinates by construction, and the terminal datum is
    // additionally averaged over permutations to enforce exchangeability of
    // the discrete solution exactly.
    let permutations: Vec<Vec<usize>> = match n {
        1 => vec![vec![0]],
        2 => vec![vec![0, 1], vec![1, 0]],
        _ => vec![
            vec![0, 1, 2],
            vec![0, 2, 1],
            vec![1, 0, 2],
            vec![1, 2, 0],
            vec![2, 0, 1],
            vec![2, 1, 0],
        ],
    };
    let perm_count = S::from_usize(permutations.len()).unwrap();
    let mut terminal = vec![S::zero(); total];
    let mut running = vec![S::zero(); total];
    for flat in 0..total {
        let idx = coords(flat);
        let pts = cloud_points(&idx);
        let mut gsum = S::zero();
        for perm in &permutations {
            let ppts: Vec<[S; 2]> = perm.iter().map(|&j| pts[j]).collect();
            gsum += spec.terminal.value_cloud(1, &ppts, &weights);
        }
        terminal[flat] = gsum / perm_count;
        running[flat] = spec.running.value_cloud(1, &pts, &weights);
    }
    // Per-axis drift coefficient of the effective Hamiltonian
    // (1/N) H(x_j, N q) = N q^2 + v(x_j) q, sonic point -v/(2N).
    let axis_drift: Vec<S> = (0..nx)
        .map(|i| spec.hamiltonian.drift.eval([g.axis(i), S::zero()])[0])
        .collect();
    let stride_of = |j: usize| nx.pow(j as u32);
    let r = g.dt / (g.dx * g.dx);
    let mut slices = vec![Vec::new(); g.time_count()];
    slices[g.nt] = terminal;
    for step in (0..g.nt).rev() {
        let prev = &slices[step + 1];
        let mut cur = vec![S::zero(); total];
        for flat in 0..total {
            let idx = coords(flat);
            let mut ham = S::zero();
            for (j, &i) in idx.iter().enumerate() {
                let stride = stride_of(j);
                let v = axis_drift[i];
                let h_ax = |q: S| nf * q * q + v * q;
                let ps = -v / (S::of(2.0) * nf);
                let pm = if i > 0 { (prev[flat] - prev[flat - stride]) / g.dx } else { S::zero() };
                let pp =
                    if i + 1 < nx { (prev[flat + stride] - prev[flat]) / g.dx } else { S::zero() };
                ham += h_ax(pm.max(ps)) + h_ax(pp.min(ps)) - h_ax(ps);
            }
            cur[flat] = prev[flat] - g.dt * ham + g.dt * running[flat];
        }
        for j in 0..n {
            let stride = stride_of(j);
            // every line along axis j: offsets enumerate the complement
            let lines = total / nx;
            for line in 0..lines {
                let low = line % stride;
                let high = line / stride;
                let offset = high * stride * nx + low;
                tensor_implicit_diffusion(&mut cur, offset, stride, nx, r);
            }
        }
        let before = sup_abs(prev);
        let after = sup_abs(&cur);
        if after.as_f64() > 10.0 * before.as_f64().max(1.0) {
            return Err(Error::BlowUp { step, before: before.as_f64(), after: after.as_f64() });
        }
        slices[step] = cur;
    }
    // Central-difference gradients per axis (one-sided at the walls).
    let gradients: Vec<Vec<[S; 3]>> = slices
        .iter()
        .map(|slice| {
            (0..total)
                .map(|flat| {
                    let idx = coords(flat);
                    let mut grad = [S::zero(); 3];
                    for (j, &i) in idx.iter().enumerate() {
                        let stride = stride_of(j);
                        grad[j] = if i == 0 {
                            (slice[flat + stride] - slice[flat]) / g.dx
                        } else if i == nx - 1 {
                            (slice[flat] - slice[flat - stride]) / g.dx
                        } else {
                            (slice[flat + stride] - slice[flat - stride])
                                / (S::of(2.0) * g.dx)
                        };
                    }
                    grad
                })
                .collect()
        })
        .collect();
    let lipschitz_diagnostic = nf
        * gradients
            .iter()
            .flatten()
            .flat_map(|grad| grad[..n].iter())
            .map(|q| q.abs())
            .fold(S::zero(), S::max);
    Ok(SmallNValue { n, grid: g.clone(), values: slices, gradients, lipschitz_diagnostic })
}

fn sup_abs<S: Real>(v: &[S]) -> S {
    v.iter().map(|x| x.abs()).fold(S::zero(), S::max)
}

/// `(I - dt Lap) u = rhs` along one tensor axis, Neumann mirror boundary
/// (identical stencil to the base value solver).
fn tensor_implicit_diffusion<S: Real>(data: &mut [S], offset: usize, stride: usize, nx: usize, r: S) {
    let two = S::of(2.0);
    let mut d: Vec<S> = (0..nx).map(|i| data[offset + i * stride]).collect();
    let mut a = vec![-r; nx];
    let b = vec![S::one() + two * r; nx];
    let mut c = vec![-r; nx];
    c[0] = -two * r;
    a[nx - 1] = -two * r;
    // Thomas elimination.
    let n = nx;
    let mut cp = vec![S::zero(); n];
    let mut bp = b[0];
    cp[0] = c[0] / bp;
    d[0] /= bp;
    for i in 1..n {
        bp = b[i] - a[i] * cp[i - 1];
        cp[i] = c[i] / bp;
        d[i] = (d[i] - a[i] * d[i - 1]) / bp;
    }
    for i in (0..n - 1).rev() {
        let next = d[i + 1];
        d[i] -= cp[i] * next;
    }
    for i in 0..nx {
        data[offset + i * stride] = d[i];
    }
}

/// Gap report `|V^N(t, x) - U(t, m^N_x)|` at sampled tensor points.
#[derive(Debug, Clone)]
pub struct VnGapReport<S: Real> {
    /// `(time index, coordinates, gap)` per sample.
    pub samples: Vec<(usize, Vec<S>, S)>,
    pub max_gap: S,
    pub mean_gap: S,
}

/// Compares the N-agent value to the mean-field value at the smoothed
/// empirical measures of sampled tensor points.  `U(t_k, m)` is evaluated by
/// re-solving the restricted problem from `(t_k, m)`; the empirical measure
/// is smoothed onto the grid with a two-cell kernel bandwidth.
pub fn vn_vs_u_gap<S: Real>(
    spec: &ProblemSpec<S>,
    small: &SmallNValue<S>,
    sample_points: usize,
    seed: u64,
) -> Result<VnGapReport<S>> {
    let g = &spec.grid;
    let n = small.n;
    let mut rng = stage_rng(seed, "vn-gap", 0);
    let bandwidth = S::of(2.0) * g.dx;
    let solver = crate::mfg::SolverConfig::default();
    let half_r = g.box_halfwidth * S::of(0.5);
    let mut samples = Vec::with_capacity(sample_points);
    for _ in 0..sample_points {
        // interior sample times (the restricted solve needs headroom) plus
        // interior coordinates, where the smoothing kernel is unclipped
        let span = g.nt.saturating_sub(8).max(1);
        let k = (S::uniform_01(&mut rng).as_f64() * span as f64) as usize;
        let k = k.min(span - 1);
        let coords: Vec<S> = (0..n)
            .map(|_| (S::uniform_01(&mut rng) * S::of(2.0) - S::one()) * half_r)
            .collect();
        let points: Vec<[S; 2]> = coords.iter().map(|&x| [x, S::zero()]).collect();
        let emp = EmpiricalMeasure::new(1, points)?;
        let spec_r = spec.restrict_from(k)?;
        let m_k = crate::measures::density_from_particles(&emp, spec_r.grid.clone(), bandwidth)?;
        let u_val = crate::mfg::value_function(&spec_r, &m_k, &solver)?;
        let vn_val = small.interpolate(k, &coords);
        let gap = (vn_val - u_val).abs();
        samples.push((k, coords, gap));
    }
    let max_gap = samples.iter().map(|s| s.2).fold(S::zero(), S::max);
    let mean_gap =
        samples.iter().map(|s| s.2).sum::<S>() / S::from_usize(samples.len().max(1)).unwrap();
    Ok(VnGapReport { samples, max_gap, mean_gap })
}

/// Optimal N-agent trajectories `Y^N`: Euler-Maruyama with the exact
/// feedback `-H_p(Y^k, N D_{x_k} V^N(t, Y))` interpolated from the tensor
/// grid.
pub fn simulate_optimal_yn<S: Real>(
    spec: &ProblemSpec<S>,
    small: &SmallNValue<S>,
    m0: &GridDensity<S>,
    seed: u64,
) -> Result<ParticleEnsemble<S>> {
    let g = &spec.grid;
    if g.dim != 1 {
        return Err(Error::Invalid("optimal small-N trajectories need a 1D base space".into()));
    }
    let n = small.n;
    let nf = S::from_usize(n).unwrap();
    let r = g.box_halfwidth;
    let mut init_rng = stage_rng(seed, "particle-init", 0);
    let mut noise_rng = stage_rng(seed, "particle-noise", 0);
    let mut positions: Vec<S> = (0..n).map(|_| m0.sample(&mut init_rng)[0]).collect();
    let mut trajectories: Vec<Vec<[S; 2]>> =
        positions.iter().map(|&p| vec![[p, S::zero()]]).collect();
    let mut exit_count = 0usize;
    let root_2dt = (S::of(2.0) * g.dt).sqrt();
    for k in 0..g.nt {
        let frozen = positions.clone();
        for (j, p) in positions.iter_mut().enumerate() {
            let q = nf * small.gradient_component(k, &frozen, j);
            let hp = spec.hamiltonian.h_p([frozen[j], S::zero()], [q, S::zero()]);
            let noise = S::std_normal(&mut noise_rng);
            let moved = *p - g.dt * hp[0] + root_2dt * noise;
            *p = reflect_into_box(moved, r, &mut exit_count);
            trajectories[j].push([*p, S::zero()]);
        }
    }
    Ok(ParticleEnsemble {
        n,
        dim: 1,
        trajectories,
        noise_seed: seed,
        dt: g.dt,
        exit_count,
        truncated_at: None,
    })
}

/// Per-replica statistic of the chaos experiment: `sup_t d_1` of the
/// mean-field-feedback ensemble against the limit flow.
fn replica_sup_d1<S: Real>(
    spec: &ProblemSpec<S>,
    sol: &MfgSolution<S>,
    n: usize,
    seed: u64,
    delta_track: S,
) -> Result<S> {
    let ens = simulate_meanfield_feedback(spec, sol, n, seed, delta_track)?;
    let g = &spec.grid;
    let mut worst = S::zero();
    for k in 0..g.time_count() {
        let d1 = if g.dim == 1 {
            let pts: Vec<S> = ens.trajectories.iter().map(|path| path[k][0]).collect();
            w1_particles_vs_grid(&pts, &sol.m.slices[k])?
        } else {
            crate::measures::wasserstein1(&ens.empirical_at(k)?, &sol.m.slices[k])?
        };
        worst = worst.max(d1);
    }
    Ok(worst)
}

/// Propagation-of-chaos rate measurement: for each N, Monte-Carlo average of
/// `sup_t d_1(m^N_t, m(t))` over independent replicas (derived per-replica
/// seeds), then a least-squares fit of `log error` against `log N`.
///
/// Errored replicas are excluded and counted; more than 20% exclusions fail
/// the whole experiment.
pub fn chaos_rate_experiment<S: Real>(
    spec: &ProblemSpec<S>,
    sol: &MfgSolution<S>,
    n_values: &[usize],
    replicas: usize,
    seed: u64,
) -> Result<ChaosExperimentResult<S>> {
    if n_values.is_empty() || replicas == 0 {
        return Err(Error::Invalid("chaos experiment needs N values and replicas".into()));
    }
    if n_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Invalid("N schedule must be strictly increasing".into()));
    }
    let delta_track = S::of(DELTA_TRACK_DEFAULT);
    let mut errors = Vec::with_capacity(n_values.len());
    let mut ci = Vec::with_capacity(n_values.len());
    let mut used = Vec::with_capacity(n_values.len());
    let mut excluded = 0usize;
    for (ni, &n) in n_values.iter().enumerate() {
        let outcomes: Vec<Result<S>> = (0..replicas)
            .into_par_iter()
            .map(|rep| {
                let rep_seed = crate::seeding::derive_seed(
                    seed,
                    "chaos-replica",
                    (ni as u64) << 32 | rep as u64,
                );
                replica_sup_d1(spec, sol, n, rep_seed, delta_track)
            })
            .collect();
        let values: Vec<f64> = outcomes.iter().filter_map(|o| o.as_ref().ok()).map(|v| v.as_f64()).collect();
        excluded += replicas - values.len();
        if values.is_empty() {
            return Err(Error::Invalid(format!("all replicas failed at N = {n}")));
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
            / (values.len() as f64 - 1.0).max(1.0);
        errors.push(S::of(mean));
        ci.push(S::of(1.96 * (var / values.len() as f64).sqrt()));
        used.push(values.len());
    }
    let total = n_values.len() * replicas;
    if (excluded as f64) > EXCLUSION_LIMIT * total as f64 {
        return Err(Error::Invalid(format!(
            "chaos experiment excluded {excluded} of {total} replicas (limit {EXCLUSION_LIMIT})"
        )));
    }
    // least squares of ln(error) on ln(N)
    let xs: Vec<f64> = n_values.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.as_f64().max(1e-300).ln()).collect();
    let m = xs.len() as f64;
    let xbar = xs.iter().sum::<f64>() / m;
    let ybar = ys.iter().sum::<f64>() / m;
    let sxx = xs.iter().map(|x| (x - xbar).powi(2)).sum::<f64>();
    let sxy = xs.iter().zip(&ys).map(|(x, y)| (x - xbar) * (y - ybar)).sum::<f64>();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = ybar - slope * xbar;
    let syy = ys.iter().map(|y| (y - ybar).powi(2)).sum::<f64>();
    let r_squared = if syy > 0.0 { (sxy * sxy) / (sxx * syy) } else { 1.0 };
    Ok(ChaosExperimentResult {
        n_values: n_values.to_vec(),
        errors,
        ci_halfwidths: ci,
        replicas_used: used,
        excluded,
        fitted_rate: -slope,
        fitted_constant: intercept.exp(),
        r_squared,
    })
}
