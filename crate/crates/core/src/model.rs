//! Problem data: Hamiltonian `H`, Lagrangian `L` by Legendre transform,
//! mean-field couplings and their flat derivatives, with sampled assumption
//! checkers.
//!
//! The Hamiltonian family is quadratic-plus-drift,
//!
//! ```text
//!     H(x, p) = |p|^2 + V(x) . p,
//! ```
//!
//! which is uniformly convex in `p` (`H_pp = 2 I`) and has the closed-form
//! Legendre transform `L(x, a) = |a + V(x)|^2 / 4`.  Couplings are
//! cylindrical, `F(m) = Phi(<phi_1, m>, ...)`, so flat derivatives are exact
//! analytic formulas rather than numerical differences.

use crate::error::{Error, Result};
use crate::grid::SpaceTimeGrid;
use crate::measures::GridDensity;
use crate::scalar::Real;
use crate::seeding::stage_rng;
use std::sync::Arc;

/// Number of Newton iterations allowed in the numeric Legendre fallback.
pub const LEGENDRE_MAX_ITER: usize = 100;
/// Residual tolerance for the duality identities.
pub const DUALITY_TOL: f64 = 1e-7;

/// Closed family of drift fields `V(x)`.
#[derive(Debug, Clone, PartialEq)]
pub enum DriftSpec<S: Real> {
    Zero,
    Constant([S; 2]),
    /// Componentwise `scale * tanh(x_i)`.
    Tanh { scale: S },
}

impl<S: Real> DriftSpec<S> {
    pub fn eval(&self, x: [S; 2]) -> [S; 2] {
        match self {
            Self::Zero => [S::zero(); 2],
            Self::Constant(c) => *c,
            Self::Tanh { scale } => [*scale * x[0].tanh(), *scale * x[1].tanh()],
        }
    }

    /// Jacobian dV_i/dx_j; the family is diagonal so only the diagonal is
    /// returned.
    pub fn jacobian_diag(&self, x: [S; 2]) -> [S; 2] {
        match self {
            Self::Zero | Self::Constant(_) => [S::zero(); 2],
            Self::Tanh { scale } => {
                let sech2 = |t: S| {
                    let c = t.cosh();
                    S::one() / (c * c)
                };
                [*scale * sech2(x[0]), *scale * sech2(x[1])]
            }
        }
    }

    /// Uniform bound on `|V|` over the box (componentwise sup).
    pub fn sup_norm(&self, box_halfwidth: S) -> S {
        match self {
            Self::Zero => S::zero(),
            Self::Constant(c) => (c[0] * c[0] + c[1] * c[1]).sqrt(),
            Self::Tanh { scale } => {
                let t = box_halfwidth.tanh();
                scale.abs() * t * S::of(std::f64::consts::SQRT_2)
            }
        }
    }
}

/// `H(x, p) = |p|^2 + V(x) . p`.
#[derive(Debug, Clone)]
pub struct Hamiltonian<S: Real> {
    pub dim: usize,
    pub drift: DriftSpec<S>,
    pub descriptor: String,
}

impl<S: Real> Hamiltonian<S> {
    pub fn quadratic(dim: usize) -> Self {
        Self { dim, drift: DriftSpec::Zero, descriptor: "quadratic".into() }
    }

    pub fn with_drift(dim: usize, drift: DriftSpec<S>, descriptor: &str) -> Self {
        Self { dim, drift, descriptor: descriptor.into() }
    }

    fn dot(&self, a: [S; 2], b: [S; 2]) -> S {
        let mut s = a[0] * b[0];
        if self.dim == 2 {
            s += a[1] * b[1];
        }
        s
    }

    pub fn h(&self, x: [S; 2], p: [S; 2]) -> S {
        self.dot(p, p) + self.dot(self.drift.eval(x), p)
    }

    /// `H_p = 2p + V(x)`.
    pub fn h_p(&self, x: [S; 2], p: [S; 2]) -> [S; 2] {
        let v = self.drift.eval(x);
        [S::of(2.0) * p[0] + v[0], S::of(2.0) * p[1] + v[1]]
    }

    /// `H_x = DV(x)^T p` (diagonal Jacobian family).
    pub fn h_x(&self, x: [S; 2], p: [S; 2]) -> [S; 2] {
        let j = self.drift.jacobian_diag(x);
        [j[0] * p[0], j[1] * p[1]]
    }

    /// `H_pp = 2 I`; returned as the scalar multiple of the identity.
    pub fn h_pp_scalar(&self) -> S {
        S::of(2.0)
    }

    /// Minimizer of `p -> H(x, p)`, used as the sonic point of the upwind flux.
    pub fn p_min(&self, x: [S; 2]) -> [S; 2] {
        let v = self.drift.eval(x);
        [-v[0] * S::of(0.5), -v[1] * S::of(0.5)]
    }

    /// Closed-form Lagrangian `L(x, a) = |a + V(x)|^2 / 4`.
    pub fn legendre(&self, x: [S; 2], a: [S; 2]) -> S {
        let v = self.drift.eval(x);
        let w = [a[0] + v[0], a[1] + v[1]];
        self.dot(w, w) * S::of(0.25)
    }

    /// `D_alpha L(x, a) = (a + V(x)) / 2`.
    pub fn l_alpha(&self, x: [S; 2], a: [S; 2]) -> [S; 2] {
        let v = self.drift.eval(x);
        [(a[0] + v[0]) * S::of(0.5), (a[1] + v[1]) * S::of(0.5)]
    }

    /// `L_{alpha,alpha} = I/2`; scalar multiple of the identity.
    pub fn l_alpha_alpha_scalar(&self) -> S {
        S::of(0.5)
    }

    /// Numeric Legendre transform `sup_p -a.p - H(x,p)` by damped Newton,
    /// kept as an independent cross-check of the closed form.
    pub fn legendre_newton(&self, x: [S; 2], a: [S; 2], max_iter: usize) -> Result<S> {
        let obj_grad = |p: [S; 2]| {
            let hp = self.h_p(x, p);
            [-a[0] - hp[0], -a[1] - hp[1]]
        };
        let mut p = [S::zero(); 2];
        let mut residual = S::infinity();
        for _ in 0..max_iter {
            let g = obj_grad(p);
            residual = self.dot(g, g).sqrt();
            if residual < S::of(1e-12) {
                return Ok(-self.dot(a, p) - self.h(x, p));
            }
            // Concave quadratic objective: the Hessian is -2I, so the Newton
            // step is g / 2; damp it for robustness anyway.
            let step = S::of(0.45);
            p = [p[0] + step * g[0], p[1] + step * g[1]];
        }
        Err(Error::LegendreNonConvergence {
            iterations: max_iter,
            x: vec![x[0].as_f64(), x[1].as_f64()],
            a: vec![a[0].as_f64(), a[1].as_f64()],
            residual: residual.as_f64(),
        })
    }
}

/// Residuals of the convex-duality identities at `alpha = -H_p(x, p)`.
#[derive(Debug, Clone)]
pub struct DualityReport<S: Real> {
    /// `|H(x,p) - H_p(x,p).p + L(x, alpha)|`
    pub hamiltonian_residual: S,
    /// `|D_alpha L(x, alpha) + p|`
    pub gradient_residual: S,
}

impl<S: Real> DualityReport<S> {
    pub fn passes(&self) -> bool {
        self.hamiltonian_residual.as_f64() <= DUALITY_TOL
            && self.gradient_residual.as_f64() <= DUALITY_TOL
    }
}

/// Checks `H - H_p.p + L(x,alpha) = 0` and `D_alpha L(x,alpha) = -p` at
/// `alpha = -H_p(x,p)`.
pub fn duality_identities<S: Real>(h: &Hamiltonian<S>, x: [S; 2], p: [S; 2]) -> DualityReport<S> {
    let hp = h.h_p(x, p);
    let alpha = [-hp[0], -hp[1]];
    let ham = h.h(x, p) - h.dot(hp, p) + h.legendre(x, alpha);
    let la = h.l_alpha(x, alpha);
    let g = [la[0] + p[0], la[1] + p[1]];
    DualityReport {
        hamiltonian_residual: ham.abs(),
        gradient_residual: h.dot(g, g).sqrt(),
    }
}

/// Closed family of scalar spatial functions used in linear couplings.
#[derive(Debug, Clone, PartialEq)]
pub enum SpatialFn<S: Real> {
    Zero,
    /// `g(x) = c . x`
    Linear { c: [S; 2] },
    /// `g(x) = amp * exp(-|x|^2 / (2 width^2))`
    Bump { amp: S, width: S },
    /// `g(x) = amp * cos(freq * x_1)`
    Cosine { amp: S, freq: S },
}

impl<S: Real> SpatialFn<S> {
    pub fn eval(&self, dim: usize, x: [S; 2]) -> S {
        match self {
            Self::Zero => S::zero(),
            Self::Linear { c } => {
                let mut s = c[0] * x[0];
                if dim == 2 {
                    s += c[1] * x[1];
                }
                s
            }
            Self::Bump { amp, width } => {
                let mut r2 = x[0] * x[0];
                if dim == 2 {
                    r2 += x[1] * x[1];
                }
                *amp * (-r2 / (S::of(2.0) * *width * *width)).exp()
            }
            Self::Cosine { amp, freq } => *amp * (*freq * x[0]).cos(),
        }
    }
}

/// Double-well profile `phi(s) = kappa (s^2 - s0^2)^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct DoubleWell<S: Real> {
    pub kappa: S,
    pub s0: S,
}

impl<S: Real> DoubleWell<S> {
    pub fn value(&self, s: S) -> S {
        self.kappa * (s * s - self.s0 * self.s0).powi(2)
    }
    pub fn d1(&self, s: S) -> S {
        S::of(4.0) * self.kappa * s * (s * s - self.s0 * self.s0)
    }
    pub fn d2(&self, s: S) -> S {
        S::of(4.0) * self.kappa * (S::of(3.0) * s * s - self.s0 * self.s0)
    }
}

/// Cylindrical mean-field coupling `F(m)` with exact flat derivatives.
#[derive(Debug, Clone, PartialEq)]
pub enum Coupling<S: Real> {
    /// `F(m) = 0`
    Zero,
    /// `F(m) = <g, m>`; flat derivative `g(x)`, second derivative zero.
    Linear { g: SpatialFn<S> },
    /// `F(m) = phi(<x_1, m>)`: a double well over the first-coordinate mean.
    /// Flat derivative `phi'(s) x_1`, second `phi''(s) x_1 y_1`.
    MeanWell { phi: DoubleWell<S> },
}

impl<S: Real> Coupling<S> {
    /// The cylindrical trace `s = <x_1, m>` where the coupling needs one.
    pub fn trace_grid(&self, m: &GridDensity<S>) -> S {
        match self {
            Self::MeanWell { .. } => m.mean()[0],
            _ => S::zero(),
        }
    }

    pub fn trace_cloud(&self, points: &[[S; 2]], weights: &[S]) -> S {
        match self {
            Self::MeanWell { .. } => {
                points.iter().zip(weights).map(|(p, &w)| w * p[0]).sum()
            }
            _ => S::zero(),
        }
    }

    /// `F(m)` for a grid density.
    pub fn value_grid(&self, m: &GridDensity<S>) -> S {
        match self {
            Self::Zero => S::zero(),
            Self::Linear { g } => {
                let grid = &m.grid;
                (0..grid.node_count())
                    .map(|n| grid.weight(n) * m.values[n] * g.eval(grid.dim, grid.position(n)))
                    .sum()
            }
            Self::MeanWell { phi } => phi.value(m.mean()[0]),
        }
    }

    /// `F(m)` for a weighted point cloud (empirical measures, tensor grids).
    pub fn value_cloud(&self, dim: usize, points: &[[S; 2]], weights: &[S]) -> S {
        match self {
            Self::Zero => S::zero(),
            Self::Linear { g } => {
                points.iter().zip(weights).map(|(p, &w)| w * g.eval(dim, *p)).sum()
            }
            Self::MeanWell { phi } => phi.value(self.trace_cloud(points, weights)),
        }
    }

    /// Flat derivative `f(x, m)` given the precomputed trace of `m`.
    pub fn flat_derivative_at(&self, dim: usize, x: [S; 2], trace: S) -> S {
        match self {
            Self::Zero => S::zero(),
            Self::Linear { g } => g.eval(dim, x),
            Self::MeanWell { phi } => phi.d1(trace) * x[0],
        }
    }

    /// Flat derivative `f(x, m)`.
    pub fn flat_derivative(&self, x: [S; 2], m: &GridDensity<S>) -> S {
        self.flat_derivative_at(m.grid.dim, x, self.trace_grid(m))
    }

    /// Second flat derivative `f_2(x, m, y)`, exact for the cylindrical family.
    pub fn second_flat_derivative(&self, x: [S; 2], m: &GridDensity<S>, y: [S; 2]) -> Option<S> {
        match self {
            Self::Zero | Self::Linear { .. } => Some(S::zero()),
            Self::MeanWell { phi } => Some(phi.d2(self.trace_grid(m)) * x[0] * y[0]),
        }
    }

    /// Whether the flat derivative actually depends on `m`; `false` makes the
    /// MFG system decoupled.
    pub fn is_measure_dependent(&self) -> bool {
        matches!(self, Self::MeanWell { .. })
    }

    /// Action of the second flat derivative on a signed nodal density:
    /// `x -> int f_2(x, m, y) rho(dy)`, returned as a nodal field.  This is
    /// the coupling term of the linearized backward equation.
    pub fn flat_derivative_action(
        &self,
        m: &GridDensity<S>,
        rho: &[S],
    ) -> Vec<S> {
        let grid = &m.grid;
        match self {
            Self::Zero | Self::Linear { .. } => vec![S::zero(); grid.node_count()],
            Self::MeanWell { phi } => {
                let w2 = phi.d2(self.trace_grid(m));
                let t: S = (0..grid.node_count())
                    .map(|n| grid.weight(n) * rho[n] * grid.position(n)[0])
                    .sum();
                (0..grid.node_count()).map(|n| w2 * t * grid.position(n)[0]).collect()
            }
        }
    }

    /// Pairing `<f_2(., m, .), rho (x) eta>` of the second flat derivative
    /// with two signed nodal densities (the quadratic coupling term of the
    /// second-order form).
    pub fn second_flat_pairing(
        &self,
        m: &GridDensity<S>,
        rho: &[S],
        eta: &[S],
    ) -> Option<S> {
        let grid = &m.grid;
        match self {
            Self::Zero | Self::Linear { .. } => Some(S::zero()),
            Self::MeanWell { phi } => {
                let first = |f: &[S]| -> S {
                    (0..grid.node_count())
                        .map(|n| grid.weight(n) * f[n] * grid.position(n)[0])
                        .sum()
                };
                Some(phi.d2(self.trace_grid(m)) * first(rho) * first(eta))
            }
        }
    }
}

/// Sampled bounds found by the assumption checkers.
#[derive(Debug, Clone)]
pub struct AssumptionReport<S: Real> {
    /// Measured lower/upper eigenvalue bounds of `H_pp` on the sample.
    pub convexity_bounds: (S, S),
    /// Growth constant `C` with `-C + |p|^2/C <= H <= C(1+|p|^2)` on the sample.
    pub growth_constant: S,
    /// Worst finite-difference mismatch of `h_p`, `h_x`, `h_pp`.
    pub derivative_mismatch: S,
    /// Worst Richardson-checked flat-derivative mismatch across couplings.
    pub flat_derivative_mismatch: S,
}

/// Full problem data for one MFC instance.
#[derive(Debug, Clone)]
pub struct ProblemSpec<S: Real> {
    pub name: String,
    pub hamiltonian: Hamiltonian<S>,
    /// Running coupling (the functional whose flat derivative feeds the HJB
    /// right-hand side).
    pub running: Coupling<S>,
    /// Terminal coupling (flat derivative gives the terminal datum).
    pub terminal: Coupling<S>,
    pub grid: Arc<SpaceTimeGrid<S>>,
    pub assumptions: AssumptionReport<S>,
}

impl<S: Real> ProblemSpec<S> {
    /// Builds a spec and runs the sampled assumption checkers; construction
    /// fails if any sampled invariant is violated.
    pub fn new(
        name: &str,
        hamiltonian: Hamiltonian<S>,
        running: Coupling<S>,
        terminal: Coupling<S>,
        grid: Arc<SpaceTimeGrid<S>>,
    ) -> Result<Self> {
        if hamiltonian.dim != grid.dim {
            return Err(Error::DimensionMismatch(format!(
                "hamiltonian dimension {} vs grid dimension {}",
                hamiltonian.dim, grid.dim
            )));
        }
        let assumptions = check_assumptions(&hamiltonian, &[&running, &terminal], &grid)?;
        Ok(Self {
            name: name.into(),
            hamiltonian,
            running,
            terminal,
            grid,
            assumptions,
        })
    }

    /// Terminal datum `G(x, m_T)` as a nodal field.
    pub fn terminal_field(&self, m_terminal: &GridDensity<S>) -> Vec<S> {
        let g = &self.grid;
        let trace = self.terminal.trace_grid(m_terminal);
        (0..g.node_count())
            .map(|n| self.terminal.flat_derivative_at(g.dim, g.position(n), trace))
            .collect()
    }

    /// Running datum `F(x, m)` as a nodal field.
    pub fn running_field(&self, m: &GridDensity<S>) -> Vec<S> {
        let g = &self.grid;
        let trace = self.running.trace_grid(m);
        (0..g.node_count())
            .map(|n| self.running.flat_derivative_at(g.dim, g.position(n), trace))
            .collect()
    }

    /// Whether the MFG system decouples (neither flat derivative depends on m).
    pub fn is_decoupled(&self) -> bool {
        !self.running.is_measure_dependent() && !self.terminal.is_measure_dependent()
    }

    /// Same problem data restricted to `[t1, T]`.
    pub fn restrict_from(&self, k1: usize) -> Result<Self> {
        Ok(Self {
            name: self.name.clone(),
            hamiltonian: self.hamiltonian.clone(),
            running: self.running.clone(),
            terminal: self.terminal.clone(),
            grid: self.grid.restrict_from(k1)?,
            assumptions: self.assumptions.clone(),
        })
    }

    /// Same problem data on the refined grid.
    pub fn refined(&self) -> Result<Self> {
        Ok(Self {
            name: self.name.clone(),
            hamiltonian: self.hamiltonian.clone(),
            running: self.running.clone(),
            terminal: self.terminal.clone(),
            grid: self.grid.refined()?,
            assumptions: self.assumptions.clone(),
        })
    }
}

fn check_assumptions<S: Real>(
    h: &Hamiltonian<S>,
    couplings: &[&Coupling<S>],
    grid: &Arc<SpaceTimeGrid<S>>,
) -> Result<AssumptionReport<S>> {
    // Convexity and growth on a 20 x 20 sample of (x, p), |p| <= 10.
    let gamma = h.h_pp_scalar();
    if gamma <= S::zero() {
        return Err(Error::AssumptionViolated(format!(
            "H_pp = {gamma} I is not positive definite"
        )));
    }
    let convexity_bounds = (gamma, gamma);

    let r = grid.box_halfwidth;
    let mut growth = S::of(2.0);
    for i in 0..20 {
        for j in 0..20 {
            let x0 = -r + S::of(2.0) * r * S::from_usize(i).unwrap() / S::of(19.0);
            let p0 = S::of(-10.0) + S::of(20.0) * S::from_usize(j).unwrap() / S::of(19.0);
            let x = [x0, if grid.dim == 2 { -x0 } else { S::zero() }];
            let p = [p0, if grid.dim == 2 { p0 * S::of(0.5) } else { S::zero() }];
            let val = h.h(x, p);
            let p2 = p[0] * p[0] + p[1] * p[1];
            // Smallest C making both growth inequalities hold at this sample.
            while growth * (S::one() + p2) < val || -growth + p2 / growth > val {
                growth *= S::of(2.0);
                if growth > S::of(1e6) {
                    return Err(Error::AssumptionViolated(format!(
                        "no growth constant below 1e6 at x = {:?}, p = {:?}",
                        [x[0].as_f64(), x[1].as_f64()],
                        [p[0].as_f64(), p[1].as_f64()]
                    )));
                }
            }
        }
    }

    // Central-difference consistency of h_p, h_x, h_pp on seeded samples.
    let mut rng = stage_rng(0, "assumption-check", 0);
    let eps = S::of(1e-4);
    let mut mismatch = S::zero();
    for _ in 0..50 {
        let rand_in = |rng: &mut _, scale: S| (S::uniform_01(rng) * S::of(2.0) - S::one()) * scale;
        let x = [rand_in(&mut rng, r), if grid.dim == 2 { rand_in(&mut rng, r) } else { S::zero() }];
        let p = [
            rand_in(&mut rng, S::of(5.0)),
            if grid.dim == 2 { rand_in(&mut rng, S::of(5.0)) } else { S::zero() },
        ];
        for axis in 0..grid.dim {
            let mut pp = p;
            let mut pm = p;
            pp[axis] += eps;
            pm[axis] -= eps;
            let fd_p = (h.h(x, pp) - h.h(x, pm)) / (S::of(2.0) * eps);
            mismatch = mismatch.max((fd_p - h.h_p(x, p)[axis]).abs());
            let fd_pp = (h.h(x, pp) - S::of(2.0) * h.h(x, p) + h.h(x, pm)) / (eps * eps);
            mismatch = mismatch.max((fd_pp - h.h_pp_scalar()).abs());
            let mut xp = x;
            let mut xm = x;
            xp[axis] += eps;
            xm[axis] -= eps;
            let fd_x = (h.h(xp, p) - h.h(xm, p)) / (S::of(2.0) * eps);
            mismatch = mismatch.max((fd_x - h.h_x(x, p)[axis]).abs());
        }
    }
    // O(eps^2) central differences with eps = 1e-4, plus float cancellation
    // in the second difference; 1e-5 covers both with slack.
    if mismatch > S::of(1e-5) {
        return Err(Error::AssumptionViolated(format!(
            "analytic derivatives disagree with finite differences by {mismatch}"
        )));
    }

    // Flat-derivative consistency via directional differences with a
    // Richardson check at s = 1e-2, 1e-3.
    let m = GridDensity::gaussian(
        grid.clone(),
        [S::of(-0.3), S::zero()],
        [S::of(0.8), S::of(0.8)],
    )?;
    let m_prime = GridDensity::gaussian(
        grid.clone(),
        [S::of(0.5), S::zero()],
        [S::of(1.1), S::of(1.1)],
    )?;
    let mut flat_mismatch = S::zero();
    for c in couplings {
        let trace = c.trace_grid(&m);
        let exact: S = (0..grid.node_count())
            .map(|n| {
                grid.weight(n)
                    * (m_prime.values[n] - m.values[n])
                    * c.flat_derivative_at(grid.dim, grid.position(n), trace)
            })
            .sum();
        let directional = |s: S| -> S {
            let mixed: Vec<S> = m
                .values
                .iter()
                .zip(&m_prime.values)
                .map(|(&a, &b)| (S::one() - s) * a + s * b)
                .collect();
            let md = GridDensity { grid: grid.clone(), values: mixed };
            (c.value_grid(&md) - c.value_grid(&m)) / s
        };
        let d2 = directional(S::of(1e-2));
        let d3 = directional(S::of(1e-3));
        // The directional difference carries an O(s) truncation error, so
        // require it to shrink with s and compare the Richardson extrapolant
        // (s-ratio 10) against the analytic flat derivative.
        let e2 = (d2 - exact).abs();
        let e3 = (d3 - exact).abs();
        if e2 > S::of(1e-8) && e3 > S::of(0.2) * e2 + S::of(1e-9) {
            return Err(Error::AssumptionViolated(format!(
                "flat-derivative directional error not O(s): {e2} -> {e3}"
            )));
        }
        let richardson = (S::of(10.0) * d3 - d2) / S::of(9.0);
        flat_mismatch = flat_mismatch.max((richardson - exact).abs());
    }
    if flat_mismatch > S::of(1e-5) {
        return Err(Error::AssumptionViolated(format!(
            "flat derivative inconsistent with directional difference: {flat_mismatch}"
        )));
    }

    Ok(AssumptionReport {
        convexity_bounds,
        growth_constant: growth,
        derivative_mismatch: mismatch,
        flat_derivative_mismatch: flat_mismatch,
    })
}

/// Default grid for the builtin problems.
pub fn default_grid<S: Real>() -> Arc<SpaceTimeGrid<S>> {
    SpaceTimeGrid::line(S::of(8.0), 129, S::zero(), S::one(), 64).expect("valid builtin grid")
}

/// The builtin problem library on a caller-supplied grid.
///
/// * `quadratic-free`: `H = |p|^2`, no running cost, linear terminal coupling
///   `G(m) = <c . x, m>` — convex benchmark with a unique minimizer.
/// * `drifted`: `H = |p|^2 + tanh(x) . p`, linear bump terminal coupling.
/// * `two-well`: `H = |p|^2`, terminal `G(m) = phi(<x, m>)` with a double-well
///   `phi` — engineered to admit two symmetric minimizers from a symmetric
///   initial measure.
pub fn builtin_library<S: Real>(grid: Arc<SpaceTimeGrid<S>>) -> Result<Vec<ProblemSpec<S>>> {
    Ok(vec![
        builtin(grid.clone(), "quadratic-free")?,
        builtin(grid.clone(), "drifted")?,
        builtin(grid, "two-well")?,
    ])
}

/// One builtin problem by descriptor name.
pub fn builtin<S: Real>(grid: Arc<SpaceTimeGrid<S>>, descriptor: &str) -> Result<ProblemSpec<S>> {
    let dim = grid.dim;
    match descriptor {
        "quadratic-free" => ProblemSpec::new(
            descriptor,
            Hamiltonian::quadratic(dim),
            Coupling::Zero,
            Coupling::Linear { g: SpatialFn::Linear { c: [S::of(0.5), S::zero()] } },
            grid,
        ),
        "drifted" => ProblemSpec::new(
            descriptor,
            Hamiltonian::with_drift(dim, DriftSpec::Tanh { scale: S::of(0.5) }, "quadratic-plus-drift"),
            Coupling::Zero,
            Coupling::Linear { g: SpatialFn::Bump { amp: S::one(), width: S::one() } },
            grid,
        ),
        "two-well" => ProblemSpec::new(
            descriptor,
            Hamiltonian::quadratic(dim),
            Coupling::Zero,
            // kappa is sized so that damped Picard contracts at the broken
            // minimizers (trace-map gain ~ -2 phi''(s*) T ~ -0.2) while the
            // symmetric saddle stays non-contractive (gain 2|phi''(0)| T = 1.6
            // at sigma = 1), which is what makes the instability detectable.
            Coupling::MeanWell { phi: DoubleWell { kappa: S::of(0.2), s0: S::one() } },
            grid,
        ),
        other => Err(Error::UnknownDescriptor(other.into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn grid() -> Arc<SpaceTimeGrid<f64>> {
        default_grid()
    }

    #[test]
    fn legendre_of_pure_quadratic() {
        let h = Hamiltonian::<f64>::quadratic(1);
        for a in [-2.0, -0.5, 0.0, 1.3] {
            assert_abs_diff_eq!(h.legendre([0.0, 0.0], [a, 0.0]), a * a / 4.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn legendre_matches_numeric_sup() {
        let h = Hamiltonian::with_drift(1, DriftSpec::Tanh { scale: 0.5 }, "quadratic-plus-drift");
        for (x, a) in [(0.3, -1.0), (-2.0, 0.7), (1.5, 2.2)] {
            let closed = h.legendre([x, 0.0], [a, 0.0]);
            // Fine grid sup over p as an independent oracle.
            let mut sup = f64::NEG_INFINITY;
            let n = 400_001;
            for i in 0..n {
                let p = -10.0 + 20.0 * i as f64 / (n - 1) as f64;
                sup = sup.max(-a * p - h.h([x, 0.0], [p, 0.0]));
            }
            assert_abs_diff_eq!(closed, sup, epsilon = 1e-8);
            let newton = h.legendre_newton([x, 0.0], [a, 0.0], LEGENDRE_MAX_ITER).unwrap();
            assert_abs_diff_eq!(closed, newton, epsilon = 1e-10);
        }
    }

    #[test]
    fn legendre_envelope_identity() {
        let h = Hamiltonian::with_drift(1, DriftSpec::Constant([0.3, 0.0]), "quadratic-plus-drift");
        let (x, p0) = ([0.7, 0.0], [1.2, 0.0]);
        let hp = h.h_p(x, p0);
        let a = [-hp[0], -hp[1]];
        let lhs = h.legendre(x, a);
        let rhs = -(a[0] * p0[0]) - h.h(x, p0);
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
    }

    #[test]
    fn legendre_newton_nonconvergence_is_reported() {
        let h = Hamiltonian::<f64>::quadratic(1);
        let err = h.legendre_newton([0.0, 0.0], [5.0, 0.0], 2).unwrap_err();
        assert!(matches!(err, Error::LegendreNonConvergence { iterations: 2, .. }));
    }

    #[test]
    fn duality_identities_hold() {
        let quad = Hamiltonian::<f64>::quadratic(1);
        assert!(duality_identities(&quad, [0.0, 0.0], [1.0, 0.0]).passes());
        assert!(duality_identities(&quad, [0.0, 0.0], [0.0, 0.0]).passes());
        let h = Hamiltonian::with_drift(1, DriftSpec::Tanh { scale: 0.5 }, "quadratic-plus-drift");
        let mut rng = stage_rng(11, "duality-samples", 0);
        for _ in 0..20 {
            let x = [4.0 * (f64::uniform_01(&mut rng) - 0.5), 0.0];
            let p = [6.0 * (f64::uniform_01(&mut rng) - 0.5), 0.0];
            let rep = duality_identities(&h, x, p);
            assert!(rep.passes(), "residuals {rep:?} at x={x:?} p={p:?}");
        }
    }

    #[test]
    fn builtins_pass_invariants() {
        let specs = builtin_library(grid()).unwrap();
        assert_eq!(specs.len(), 3);
        for s in &specs {
            let (lo, hi) = s.assumptions.convexity_bounds;
            assert!(lo >= 2.0 - 1e-12 && hi <= 2.0 + 1e-12);
        }
        assert!(builtin(grid(), "no-such-problem").is_err());
    }

    #[test]
    fn legendre_involutive_on_quadratic_family() {
        // With L(x,a) = sup_p -a.p - H(x,p), the inverse transform is
        // H(x,p) = sup_a -p.a - L(x,a).
        let h = Hamiltonian::with_drift(1, DriftSpec::Tanh { scale: 0.5 }, "quadratic-plus-drift");
        let mut rng = stage_rng(13, "involution-samples", 0);
        for _ in 0..20 {
            let x = [4.0 * (f64::uniform_01(&mut rng) - 0.5), 0.0];
            let p = [6.0 * (f64::uniform_01(&mut rng) - 0.5), 0.0];
            let mut sup = f64::NEG_INFINITY;
            let n = 200_001;
            for i in 0..n {
                let a = -30.0 + 60.0 * i as f64 / (n - 1) as f64;
                sup = sup.max(-p[0] * a - h.legendre(x, [a, 0.0]));
            }
            assert_abs_diff_eq!(sup, h.h(x, p), epsilon = 1e-7);
        }
    }

    #[test]
    fn mean_well_flat_derivative_action_is_exact() {
        let g = grid();
        let phi = DoubleWell { kappa: 1.0, s0: 1.0 };
        let c = Coupling::MeanWell { phi: phi.clone() };
        let m = GridDensity::gaussian(g.clone(), [0.4, 0.0], [0.7, 0.7]).unwrap();
        // rho = dipole d/dx of a bump, first moment computed by quadrature
        let rho: Vec<f64> = (0..g.node_count())
            .map(|n| {
                let x = g.position(n)[0];
                -x * (-x * x).exp()
            })
            .collect();
        let t: f64 = (0..g.node_count()).map(|n| g.weight(n) * rho[n] * g.position(n)[0]).sum();
        let action = c.flat_derivative_action(&m, &rho);
        let s = m.mean()[0];
        for n in (0..g.node_count()).step_by(17) {
            assert_abs_diff_eq!(action[n], phi.d2(s) * t * g.position(n)[0], epsilon = 1e-12);
        }
    }

    #[test]
    fn coupling_values_match_cloud_and_grid() {
        let g = grid();
        let c = Coupling::Linear { g: SpatialFn::Linear { c: [0.5, 0.0] } };
        let m = GridDensity::gaussian(g.clone(), [0.6, 0.0], [0.5, 0.5]).unwrap();
        // grid value = 0.5 * mean
        assert_abs_diff_eq!(c.value_grid(&m), 0.5 * m.mean()[0], epsilon = 1e-12);
        let pts = vec![[1.0, 0.0], [3.0, 0.0]];
        let ws = vec![0.5, 0.5];
        assert_abs_diff_eq!(c.value_cloud(1, &pts, &ws), 1.0, epsilon = 1e-12);
    }
}
