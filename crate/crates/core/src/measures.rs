//! Probability measures on the truncated box: grid densities, particle
//! empirical measures, Wasserstein distances and moments.

use crate::error::{Error, Result};
use crate::grid::SpaceTimeGrid;
use crate::scalar::Real;
use rand::Rng;
use std::sync::Arc;

/// Mass-normalization tolerance enforced on grid densities.
pub const MASS_TOL: f64 = 1e-9;
/// Boundary mass above this level means the truncation radius is too small.
pub const BOUNDARY_MASS_LIMIT: f64 = 1e-6;
/// Largest support handed to the transport LP; larger clouds are subsampled.
pub const MAX_LP_SUPPORT: usize = 512;
/// Seed of the deterministic subsampling used when a cloud exceeds
/// [`MAX_LP_SUPPORT`]; recorded here so reruns agree byte-for-byte.
pub const SUBSAMPLE_SEED: u64 = 0x5741_5353;

/// Nonnegative density on one time slice, trapezoid mass one.
#[derive(Debug, Clone)]
pub struct GridDensity<S: Real> {
    pub grid: Arc<SpaceTimeGrid<S>>,
    pub values: Vec<S>,
}

impl<S: Real> GridDensity<S> {
    /// Builds a density from nonnegative nodal values and normalizes it.
    pub fn new(grid: Arc<SpaceTimeGrid<S>>, values: Vec<S>) -> Result<Self> {
        if values.len() != grid.node_count() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} nodal values, got {}",
                grid.node_count(),
                values.len()
            )));
        }
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() || v < S::zero() {
                return Err(Error::NegativeDensity { node: i, value: v.as_f64() });
            }
        }
        let mut d = Self { grid, values };
        d.normalize()?;
        Ok(d)
    }

    /// Truncated Gaussian with independent coordinates.
    pub fn gaussian(grid: Arc<SpaceTimeGrid<S>>, mean: [S; 2], std: [S; 2]) -> Result<Self> {
        let vals: Vec<S> = (0..grid.node_count())
            .map(|n| {
                let p = grid.position(n);
                let mut e = ((p[0] - mean[0]) / std[0]).powi(2);
                if grid.dim == 2 {
                    e += ((p[1] - mean[1]) / std[1]).powi(2);
                }
                (-e * S::of(0.5)).exp()
            })
            .collect();
        Self::new(grid, vals)
    }

    /// Rescales to trapezoid mass one.
    pub fn normalize(&mut self) -> Result<()> {
        let mass = self.grid.integrate(&self.values);
        if !mass.is_finite() || mass <= S::zero() {
            return Err(Error::Invalid(format!("cannot normalize density with mass {mass}")));
        }
        for v in &mut self.values {
            *v /= mass;
        }
        Ok(())
    }

    pub fn mass(&self) -> S {
        self.grid.integrate(&self.values)
    }

    /// Mass carried by the boundary ring of nodes; kept below
    /// [`BOUNDARY_MASS_LIMIT`] by choosing the truncation radius large enough.
    pub fn boundary_mass(&self) -> S {
        let g = &self.grid;
        (0..g.node_count())
            .filter(|&n| {
                if g.dim == 1 {
                    n == 0 || n == g.nx - 1
                } else {
                    let (i, j) = (n / g.nx, n % g.nx);
                    i == 0 || j == 0 || i == g.nx - 1 || j == g.nx - 1
                }
            })
            .map(|n| g.weight(n) * self.values[n])
            .sum()
    }

    pub fn check_boundary_mass(&self) -> Result<()> {
        let m = self.boundary_mass().as_f64();
        if m > BOUNDARY_MASS_LIMIT {
            return Err(Error::BoundaryMass { mass: m, limit: BOUNDARY_MASS_LIMIT });
        }
        Ok(())
    }

    pub fn mean(&self) -> [S; 2] {
        let g = &self.grid;
        let mut m = [S::zero(); 2];
        for n in 0..g.node_count() {
            let p = g.position(n);
            let w = g.weight(n) * self.values[n];
            m[0] += w * p[0];
            m[1] += w * p[1];
        }
        m
    }

    pub fn variance(&self) -> S {
        let mu = self.mean();
        let g = &self.grid;
        (0..g.node_count())
            .map(|n| {
                let p = g.position(n);
                let mut r2 = (p[0] - mu[0]).powi(2);
                if g.dim == 2 {
                    r2 += (p[1] - mu[1]).powi(2);
                }
                g.weight(n) * self.values[n] * r2
            })
            .sum()
    }

    /// One i.i.d. sample (inverse CDF in 1D, rejection in 2D).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [S; 2] {
        let g = &self.grid;
        if g.dim == 1 {
            // Piecewise-linear CDF over cells built from trapezoid cell masses.
            let u = S::uniform_01(rng);
            let mut acc = S::zero();
            for i in 0..g.nx - 1 {
                let cell = (self.values[i] + self.values[i + 1]) * S::of(0.5) * g.dx;
                if acc + cell >= u || i == g.nx - 2 {
                    let f = if cell > S::zero() { (u - acc) / cell } else { S::of(0.5) };
                    let f = f.max(S::zero()).min(S::one());
                    return [g.axis(i) + f * g.dx, S::zero()];
                }
                acc += cell;
            }
            [g.axis(g.nx - 1), S::zero()]
        } else {
            let peak = self.values.iter().cloned().fold(S::zero(), S::max);
            let r = g.box_halfwidth;
            loop {
                let x = (S::uniform_01(rng) * S::of(2.0) - S::one()) * r;
                let y = (S::uniform_01(rng) * S::of(2.0) - S::one()) * r;
                let u = S::uniform_01(rng) * peak;
                if u <= g.interpolate(&self.values, [x, y]) {
                    return [x, y];
                }
            }
        }
    }
}

/// The discrete flow `t -> m(t)`.
#[derive(Debug, Clone)]
pub struct DensityPath<S: Real> {
    pub grid: Arc<SpaceTimeGrid<S>>,
    pub slices: Vec<GridDensity<S>>,
}

impl<S: Real> DensityPath<S> {
    pub fn new(grid: Arc<SpaceTimeGrid<S>>, slices: Vec<GridDensity<S>>) -> Result<Self> {
        if slices.len() != grid.time_count() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} time slices, got {}",
                grid.time_count(),
                slices.len()
            )));
        }
        Ok(Self { grid, slices })
    }

    /// Constant-in-time path (used as an initial Picard guess).
    pub fn frozen(grid: Arc<SpaceTimeGrid<S>>, m0: &GridDensity<S>) -> Self {
        let slices = vec![m0.clone(); grid.time_count()];
        Self { grid, slices }
    }

    pub fn terminal(&self) -> &GridDensity<S> {
        self.slices.last().expect("path has nt+1 >= 9 slices")
    }
}

/// Uniform atomic measure on particle positions.
#[derive(Debug, Clone)]
pub struct EmpiricalMeasure<S: Real> {
    pub dim: usize,
    pub points: Vec<[S; 2]>,
}

impl<S: Real> EmpiricalMeasure<S> {
    pub fn new(dim: usize, points: Vec<[S; 2]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyMeasure);
        }
        for p in &points {
            if !p[0].is_finite() || !p[1].is_finite() {
                return Err(Error::Invalid("empirical measure contains non-finite point".into()));
            }
        }
        Ok(Self { dim, points })
    }

    pub fn dirac(dim: usize, point: [S; 2]) -> Self {
        Self { dim, points: vec![point] }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn mean(&self) -> [S; 2] {
        let n = S::from_usize(self.points.len()).unwrap();
        let mut m = [S::zero(); 2];
        for p in &self.points {
            m[0] += p[0];
            m[1] += p[1];
        }
        [m[0] / n, m[1] / n]
    }
}

/// Weighted point cloud: the common denominator for transport distances.
#[derive(Debug, Clone)]
pub struct AtomCloud<S: Real> {
    pub dim: usize,
    pub points: Vec<[S; 2]>,
    pub weights: Vec<S>,
}

impl<S: Real> AtomCloud<S> {
    pub fn new(dim: usize, points: Vec<[S; 2]>, weights: Vec<S>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyMeasure);
        }
        if points.len() != weights.len() {
            return Err(Error::DimensionMismatch("points/weights length mismatch".into()));
        }
        let total: S = weights.iter().cloned().sum();
        if (total - S::one()).abs() > S::of(1e-7) {
            return Err(Error::Invalid(format!("atom weights sum to {total}, expected 1")));
        }
        Ok(Self { dim, points, weights })
    }
}

/// Anything that can be flattened into a weighted point cloud.
pub trait ToAtoms<S: Real> {
    fn dim(&self) -> usize;
    fn to_atoms(&self) -> AtomCloud<S>;
}

impl<S: Real> ToAtoms<S> for EmpiricalMeasure<S> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn to_atoms(&self) -> AtomCloud<S> {
        let w = S::one() / S::from_usize(self.points.len()).unwrap();
        AtomCloud { dim: self.dim, points: self.points.clone(), weights: vec![w; self.points.len()] }
    }
}

impl<S: Real> ToAtoms<S> for GridDensity<S> {
    fn dim(&self) -> usize {
        self.grid.dim
    }
    /// Cell-centered discretization: one atom per cell carrying the
    /// trapezoid cell mass, renormalized to one.
    fn to_atoms(&self) -> AtomCloud<S> {
        let g = &self.grid;
        let mut points = Vec::new();
        let mut weights = Vec::new();
        let half = S::of(0.5);
        if g.dim == 1 {
            for i in 0..g.nx - 1 {
                let w = (self.values[i] + self.values[i + 1]) * half * g.dx;
                points.push([g.axis(i) + half * g.dx, S::zero()]);
                weights.push(w);
            }
        } else {
            let quarter = S::of(0.25);
            for i in 0..g.nx - 1 {
                for j in 0..g.nx - 1 {
                    let w = (self.values[g.node_index_2d(i, j)]
                        + self.values[g.node_index_2d(i + 1, j)]
                        + self.values[g.node_index_2d(i, j + 1)]
                        + self.values[g.node_index_2d(i + 1, j + 1)])
                        * quarter
                        * g.dx
                        * g.dx;
                    points.push([g.axis(i) + half * g.dx, g.axis(j) + half * g.dx]);
                    weights.push(w);
                }
            }
        }
        let total: S = weights.iter().cloned().sum();
        for w in &mut weights {
            *w /= total;
        }
        AtomCloud { dim: g.dim, points, weights }
    }
}

impl<S: Real> ToAtoms<S> for AtomCloud<S> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn to_atoms(&self) -> AtomCloud<S> {
        self.clone()
    }
}

/// 1-Wasserstein distance (exact quantile formula in 1D, transport LP in 2D).
pub fn wasserstein1<S: Real>(a: &impl ToAtoms<S>, b: &impl ToAtoms<S>) -> Result<S> {
    wasserstein_p(a, b, 1)
}

/// 2-Wasserstein distance.
pub fn wasserstein2<S: Real>(a: &impl ToAtoms<S>, b: &impl ToAtoms<S>) -> Result<S> {
    wasserstein_p(a, b, 2)
}

fn wasserstein_p<S: Real>(a: &impl ToAtoms<S>, b: &impl ToAtoms<S>, p: u32) -> Result<S> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(format!(
            "measures live in dimensions {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    let ca = a.to_atoms();
    let cb = b.to_atoms();
    if ca.dim == 1 {
        Ok(wasserstein_1d(&ca, &cb, p))
    } else {
        let ca = maybe_subsample(ca);
        let cb = maybe_subsample(cb);
        let cost = transport::min_cost(&ca, &cb, p);
        Ok(if p == 2 { cost.sqrt() } else { cost })
    }
}

/// Exact 1D distance through the quantile coupling: merge the two cumulative
/// weight sequences and integrate `|F_a^{-1} - F_b^{-1}|^p` segment by segment.
fn wasserstein_1d<S: Real>(a: &AtomCloud<S>, b: &AtomCloud<S>, p: u32) -> S {
    let sorted = |c: &AtomCloud<S>| {
        let mut idx: Vec<usize> = (0..c.points.len()).collect();
        idx.sort_by(|&i, &j| c.points[i][0].partial_cmp(&c.points[j][0]).unwrap());
        idx.into_iter().map(|i| (c.points[i][0], c.weights[i])).collect::<Vec<_>>()
    };
    let sa = sorted(a);
    let sb = sorted(b);
    let (mut ia, mut ib) = (0usize, 0usize);
    let (mut ra, mut rb) = (sa[0].1, sb[0].1);
    let mut acc = S::zero();
    loop {
        let gap = (sa[ia].0 - sb[ib].0).abs();
        let seg = ra.min(rb);
        acc += seg * if p == 1 { gap } else { gap * gap };
        ra -= seg;
        rb -= seg;
        if ra <= S::zero() {
            ia += 1;
            if ia >= sa.len() {
                break;
            }
            ra = sa[ia].1;
        }
        if rb <= S::zero() {
            ib += 1;
            if ib >= sb.len() {
                break;
            }
            rb = sb[ib].1;
        }
    }
    if p == 2 {
        acc.sqrt()
    } else {
        acc
    }
}

/// Desk-scale budget for the transport LP: clouds above [`MAX_LP_SUPPORT`]
/// atoms are replaced by a seeded i.i.d. subsample with uniform weights.
fn maybe_subsample<S: Real>(c: AtomCloud<S>) -> AtomCloud<S> {
    if c.points.len() <= MAX_LP_SUPPORT {
        return c;
    }
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(SUBSAMPLE_SEED);
    let mut cdf = Vec::with_capacity(c.weights.len());
    let mut acc = S::zero();
    for &w in &c.weights {
        acc += w;
        cdf.push(acc);
    }
    let points: Vec<[S; 2]> = (0..MAX_LP_SUPPORT)
        .map(|_| {
            let u = S::uniform_01(&mut rng) * acc;
            let k = cdf.partition_point(|&x| x < u).min(c.points.len() - 1);
            c.points[k]
        })
        .collect();
    let w = S::one() / S::from_usize(MAX_LP_SUPPORT).unwrap();
    AtomCloud { dim: c.dim, points, weights: vec![w; MAX_LP_SUPPORT] }
}

/// `p`-th moment `M_p(m)` of a measure.
pub fn moment<S: Real>(m: &impl ToAtoms<S>, p: u32) -> Result<S> {
    if p == 0 || p > 8 {
        return Err(Error::Invalid(format!("moment order must be in 1..=8, got {p}")));
    }
    let c = m.to_atoms();
    Ok(c
        .points
        .iter()
        .zip(&c.weights)
        .map(|(pt, &w)| {
            let r = if c.dim == 1 {
                pt[0].abs()
            } else {
                (pt[0] * pt[0] + pt[1] * pt[1]).sqrt()
            };
            w * r.powi(p as i32)
        })
        .sum())
}

/// Gaussian-kernel density estimate of a particle cloud on the grid.
pub fn density_from_particles<S: Real>(
    e: &EmpiricalMeasure<S>,
    grid: Arc<SpaceTimeGrid<S>>,
    bandwidth: S,
) -> Result<GridDensity<S>> {
    if bandwidth <= S::zero() {
        return Err(Error::InvalidBandwidth(bandwidth.as_f64()));
    }
    if e.dim != grid.dim {
        return Err(Error::DimensionMismatch(format!(
            "particles in dimension {}, grid in dimension {}",
            e.dim, grid.dim
        )));
    }
    let inv2h2 = S::one() / (S::of(2.0) * bandwidth * bandwidth);
    let vals: Vec<S> = (0..grid.node_count())
        .map(|n| {
            let p = grid.position(n);
            e.points
                .iter()
                .map(|q| {
                    let mut r2 = (p[0] - q[0]).powi(2);
                    if grid.dim == 2 {
                        r2 += (p[1] - q[1]).powi(2);
                    }
                    (-r2 * inv2h2).exp()
                })
                .sum()
        })
        .collect();
    GridDensity::new(grid, vals)
}

mod transport {
    //! Exact discrete optimal transport by successive shortest augmenting
    //! paths with potentials on the complete bipartite supply/demand graph.
    //! Augmentation count is at most `m + n - 1`, so desk-scale supports are
    //! cheap and the result is an exact LP optimum up to float rounding.

    use super::AtomCloud;
    use crate::scalar::Real;
    use std::cmp::Ordering;
    use std::collections::BinaryHeap;

    struct HeapItem<S> {
        dist: S,
        node: usize,
    }
    impl<S: PartialOrd> PartialEq for HeapItem<S> {
        fn eq(&self, other: &Self) -> bool {
            self.dist == other.dist
        }
    }
    impl<S: PartialOrd> Eq for HeapItem<S> {}
    impl<S: PartialOrd> PartialOrd for HeapItem<S> {
        fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
            // reversed for a min-heap
            other.dist.partial_cmp(&self.dist)
        }
    }
    impl<S: PartialOrd> Ord for HeapItem<S> {
        fn cmp(&self, other: &Self) -> Ordering {
            self.partial_cmp(other).unwrap_or(Ordering::Equal)
        }
    }

    pub fn min_cost<S: Real>(a: &AtomCloud<S>, b: &AtomCloud<S>, p: u32) -> S {
        let m = a.points.len();
        let n = b.points.len();
        let cost = |i: usize, j: usize| -> S {
            let dx = a.points[i][0] - b.points[j][0];
            let dy = a.points[i][1] - b.points[j][1];
            let d2 = dx * dx + dy * dy;
            if p == 1 {
                d2.sqrt()
            } else {
                d2
            }
        };

        let mut supply = a.weights.clone();
        let mut demand = b.weights.clone();
        let mut flow = vec![S::zero(); m * n];
        // Johnson potentials keep the reduced costs nonnegative.
        let mut pot_a = vec![S::zero(); m];
        let mut pot_b = vec![S::zero(); n];
        let tiny = S::of(1e-15);
        let mut total = S::zero();

        loop {
            let active: Vec<usize> = (0..m).filter(|&i| supply[i] > tiny).collect();
            if active.is_empty() {
                break;
            }
            // Multi-source Dijkstra on the residual graph.
            let inf = S::infinity();
            let mut dist_a = vec![inf; m];
            let mut dist_b = vec![inf; n];
            let mut from_b = vec![usize::MAX; n]; // source used to reach sink j
            let mut from_a = vec![usize::MAX; m]; // sink whose back-edge reached source i
            let mut heap: BinaryHeap<HeapItem<S>> = BinaryHeap::new();
            for &i in &active {
                dist_a[i] = S::zero();
                heap.push(HeapItem { dist: S::zero(), node: i });
            }
            let mut done_a = vec![false; m];
            let mut done_b = vec![false; n];
            while let Some(HeapItem { dist, node }) = heap.pop() {
                if node < m {
                    let i = node;
                    if done_a[i] || dist > dist_a[i] {
                        continue;
                    }
                    done_a[i] = true;
                    for j in 0..n {
                        let rc = (cost(i, j) - pot_a[i] - pot_b[j]).max(S::zero());
                        let nd = dist + rc;
                        if nd < dist_b[j] {
                            dist_b[j] = nd;
                            from_b[j] = i;
                            heap.push(HeapItem { dist: nd, node: m + j });
                        }
                    }
                } else {
                    let j = node - m;
                    if done_b[j] || dist > dist_b[j] {
                        continue;
                    }
                    done_b[j] = true;
                    for i in 0..m {
                        if flow[i * n + j] > tiny {
                            let rc = (pot_a[i] + pot_b[j] - cost(i, j)).max(S::zero());
                            let nd = dist + rc;
                            if nd < dist_a[i] {
                                dist_a[i] = nd;
                                from_a[i] = j;
                                heap.push(HeapItem { dist: nd, node: i });
                            }
                        }
                    }
                }
            }

            // Closest sink with remaining demand.
            let mut target = usize::MAX;
            for j in 0..n {
                if demand[j] > tiny
                    && dist_b[j] < inf
                    && (target == usize::MAX || dist_b[j] < dist_b[target])
                {
                    target = j;
                }
            }
            if target == usize::MAX {
                break;
            }

            // Bottleneck along the alternating path.
            let mut path = Vec::new(); // (i, j, forward?)
            let mut j = target;
            let mut bottleneck = demand[target];
            loop {
                let i = from_b[j];
                path.push((i, j, true));
                if dist_a[i] == S::zero() && supply[i] > tiny {
                    bottleneck = bottleneck.min(supply[i]);
                    break;
                }
                let jb = from_a[i];
                bottleneck = bottleneck.min(flow[i * n + jb]);
                path.push((i, jb, false));
                j = jb;
            }
            for &(i, j, fwd) in &path {
                if fwd {
                    flow[i * n + j] += bottleneck;
                } else {
                    flow[i * n + j] -= bottleneck;
                }
            }
            let (src, _, _) = *path.last().unwrap();
            supply[src] -= bottleneck;
            demand[target] -= bottleneck;

            // Potential update.  With the bipartite convention
            // `rc = cost - pot_a - pot_b`, the two sides move in opposite
            // directions: `pot_a -= dist` and `pot_b += dist` keep every
            // residual reduced cost nonnegative and the tree edges tight.
            for i in 0..m {
                if dist_a[i] < inf {
                    pot_a[i] -= dist_a[i];
                }
            }
            for j in 0..n {
                if dist_b[j] < inf {
                    pot_b[j] += dist_b[j];
                }
            }
        }

        for i in 0..m {
            for j in 0..n {
                if flow[i * n + j] > S::zero() {
                    total += flow[i * n + j] * cost(i, j);
                }
            }
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn grid1d() -> Arc<SpaceTimeGrid<f64>> {
        SpaceTimeGrid::line(8.0, 257, 0.0, 1.0, 16).unwrap()
    }

    fn atoms(dim: usize, pts: &[(f64, f64)], ws: &[f64]) -> AtomCloud<f64> {
        AtomCloud::new(dim, pts.iter().map(|&(x, y)| [x, y]).collect(), ws.to_vec()).unwrap()
    }

    #[test]
    fn two_diracs_distance_is_separation() {
        let a = EmpiricalMeasure::dirac(1, [0.0, 0.0]);
        let b = EmpiricalMeasure::dirac(1, [1.0, 0.0]);
        assert_abs_diff_eq!(wasserstein1(&a, &b).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(wasserstein1(&a, &a).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn uniform_pair_shift() {
        // uniform on {0,1} vs uniform on {0,3}: optimal plan keeps the shared
        // atom and ships mass 1/2 over distance 2.
        let a = atoms(1, &[(0.0, 0.0), (1.0, 0.0)], &[0.5, 0.5]);
        let b = atoms(1, &[(0.0, 0.0), (3.0, 0.0)], &[0.5, 0.5]);
        assert_abs_diff_eq!(wasserstein1(&a, &b).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn w2_dirac_vs_symmetric_pair() {
        let a = EmpiricalMeasure::dirac(1, [0.0, 0.0]);
        let b = atoms(1, &[(-1.0, 0.0), (1.0, 0.0)], &[0.5, 0.5]);
        assert_abs_diff_eq!(wasserstein2(&a, &b).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn w2_translation_of_gaussian() {
        let g = grid1d();
        let a = GridDensity::gaussian(g.clone(), [0.0, 0.0], [0.8, 1.0]).unwrap();
        let b = GridDensity::gaussian(g.clone(), [0.7, 0.0], [0.8, 1.0]).unwrap();
        let d = wasserstein2(&a, &b).unwrap();
        assert_abs_diff_eq!(d, 0.7, epsilon = 2e-3);
        let d1 = wasserstein1(&a, &b).unwrap();
        assert!(d1 <= d + 1e-12, "d1 = {d1} should not exceed d2 = {d}");
    }

    #[test]
    fn dim_mismatch_and_empty_rejected() {
        let a = EmpiricalMeasure::dirac(1, [0.0, 0.0]);
        let b = EmpiricalMeasure::dirac(2, [0.0, 0.0]);
        assert!(wasserstein1(&a, &b).is_err());
        assert!(EmpiricalMeasure::<f64>::new(1, vec![]).is_err());
    }

    #[test]
    fn moments() {
        let d = EmpiricalMeasure::dirac(1, [2.0, 0.0]);
        assert_abs_diff_eq!(moment(&d, 2).unwrap(), 4.0, epsilon = 1e-12);
        let u = atoms(1, &[(-1.0, 0.0), (1.0, 0.0)], &[0.5, 0.5]);
        assert_abs_diff_eq!(moment(&u, 1).unwrap(), 1.0, epsilon = 1e-12);
        let g = GridDensity::gaussian(grid1d(), [0.0, 0.0], [1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(moment(&g, 2).unwrap(), 1.0, epsilon = 1e-3);
        assert!(moment(&d, 9).is_err());
    }

    #[test]
    fn two_dimensional_transport_against_hand_values() {
        let a = atoms(2, &[(0.0, 0.0)], &[1.0]);
        let b = atoms(2, &[(3.0, 4.0)], &[1.0]);
        assert_abs_diff_eq!(wasserstein1(&a, &b).unwrap(), 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(wasserstein2(&a, &b).unwrap(), 5.0, epsilon = 1e-12);

        // split mass: half stays, half moves distance 2 along y
        let a = atoms(2, &[(0.0, 0.0), (0.0, 2.0)], &[0.5, 0.5]);
        let b = atoms(2, &[(0.0, 0.0), (0.0, 4.0)], &[0.5, 0.5]);
        assert_abs_diff_eq!(wasserstein1(&a, &b).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn kde_single_particle_peaks_at_center() {
        let g = grid1d();
        let e = EmpiricalMeasure::dirac(1, [0.0, 0.0]);
        let d = density_from_particles(&e, g.clone(), 0.05).unwrap();
        assert_abs_diff_eq!(d.mass(), 1.0, epsilon = 1e-12);
        let peak = d
            .values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_abs_diff_eq!(g.position(peak)[0], 0.0, epsilon = g.dx);
        assert!(density_from_particles(&e, g, 0.0).is_err());
    }

    #[test]
    fn kde_symmetric_particles_give_symmetric_density() {
        let g = grid1d();
        let e = EmpiricalMeasure::new(1, vec![[-1.0, 0.0], [1.0, 0.0]]).unwrap();
        let d = density_from_particles(&e, g.clone(), 0.3).unwrap();
        for i in 0..g.nx {
            let j = g.nx - 1 - i;
            assert_abs_diff_eq!(d.values[i], d.values[j], epsilon = 1e-12);
        }
    }

    #[test]
    fn grid_density_mass_and_boundary() {
        let g = grid1d();
        let d = GridDensity::gaussian(g, [0.0, 0.0], [1.0, 1.0]).unwrap();
        assert!((d.mass() - 1.0).abs() < MASS_TOL);
        d.check_boundary_mass().unwrap();
    }
}
