//! Shared helpers for the integration tests: an independent dense two-phase
//! simplex solver used as an exhaustive-LP oracle for the library's
//! Wasserstein distances, plus random atom-cloud generators.

use mfc_core::measures::AtomCloud;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-11;

fn pivot(t: &mut [Vec<f64>], r: usize, j: usize) {
    let p = t[r][j];
    for v in t[r].iter_mut() {
        *v /= p;
    }
    for i in 0..t.len() {
        if i == r {
            continue;
        }
        let f = t[i][j];
        if f == 0.0 {
            continue;
        }
        for k in 0..t[i].len() {
            let d = f * t[r][k];
            t[i][k] -= d;
        }
    }
}

/// One simplex phase under Bland's rule: entering = first column with
/// negative reduced cost among `0..allowed`, leaving by minimum ratio with
/// smallest basis index on ties.  Terminates by Bland's anti-cycling
/// guarantee.
fn run_phase(t: &mut [Vec<f64>], basis: &mut [usize], cost: &[f64], allowed: usize) {
    loop {
        let mut entering = None;
        for j in 0..allowed {
            if basis.contains(&j) {
                continue;
            }
            let mut red = cost[j];
            for i in 0..t.len() {
                red -= cost[basis[i]] * t[i][j];
            }
            if red < -TOL {
                entering = Some(j);
                break;
            }
        }
        let Some(j) = entering else { break };
        let rhs = t[0].len() - 1;
        let mut leave: Option<(usize, f64)> = None;
        for i in 0..t.len() {
            if t[i][j] > TOL {
                let ratio = t[i][rhs] / t[i][j];
                let better = match leave {
                    None => true,
                    Some((li, lr)) => {
                        ratio < lr - 1e-15
                            || ((ratio - lr).abs() <= 1e-15 && basis[i] < basis[li])
                    }
                };
                if better {
                    leave = Some((i, ratio));
                }
            }
        }
        let (r, _) = leave.expect("transport LP is bounded");
        pivot(t, r, j);
        basis[r] = j;
    }
}

/// Minimizes `c . x` subject to `A x = b`, `x >= 0` with a dense two-phase
/// tableau simplex.  Sized for tiny instances (transport polytopes of at
/// most a few dozen variables); panics on infeasible input.
pub fn simplex_min(c: &[f64], a: &[Vec<f64>], b: &[f64]) -> f64 {
    let m = a.len();
    let n = c.len();
    let cols = n + m; // original variables plus one artificial per row
    let mut t = vec![vec![0.0; cols + 1]; m];
    for i in 0..m {
        let flip = if b[i] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..n {
            t[i][j] = flip * a[i][j];
        }
        t[i][n + i] = 1.0;
        t[i][cols] = flip * b[i];
    }
    let mut basis: Vec<usize> = (n..cols).collect();

    // phase 1: minimize the artificial mass
    let mut phase1 = vec![0.0; cols];
    for v in phase1.iter_mut().skip(n) {
        *v = 1.0;
    }
    run_phase(&mut t, &mut basis, &phase1, cols);
    let infeas: f64 = (0..m).filter(|&i| basis[i] >= n).map(|i| t[i][cols]).sum();
    assert!(infeas.abs() < 1e-8, "infeasible LP (artificial mass {infeas})");

    // drive basic artificials out; a row with no eligible original column is
    // a redundant constraint and gets dropped
    let mut keep = vec![true; m];
    for r in 0..m {
        if basis[r] < n {
            continue;
        }
        match (0..n).find(|j| !basis.contains(j) && t[r][*j].abs() > TOL) {
            Some(j) => {
                pivot(&mut t, r, j);
                basis[r] = j;
            }
            None => keep[r] = false,
        }
    }
    let mut kept_t = Vec::new();
    let mut kept_basis = Vec::new();
    for r in 0..m {
        if keep[r] {
            kept_t.push(t[r].clone());
            kept_basis.push(basis[r]);
        }
    }

    // phase 2 on the original cost; artificial columns may not re-enter
    let mut phase2 = vec![0.0; cols];
    phase2[..n].copy_from_slice(c);
    run_phase(&mut kept_t, &mut kept_basis, &phase2, n);
    (0..kept_t.len()).map(|i| phase2[kept_basis[i]] * kept_t[i][cols]).sum()
}

/// Exhaustive-LP p-Wasserstein distance between two atom clouds: the full
/// transport linear program solved by the simplex above, independent of the
/// library's min-cost-flow / quantile implementations.
pub fn lp_wasserstein(a: &AtomCloud<f64>, b: &AtomCloud<f64>, p: u32) -> f64 {
    let m = a.points.len();
    let n = b.points.len();
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let dx = a.points[i][0] - b.points[j][0];
            let dy = if a.dim == 2 { a.points[i][1] - b.points[j][1] } else { 0.0 };
            c[i * n + j] = (dx * dx + dy * dy).sqrt().powi(p as i32);
        }
    }
    let mut rows = Vec::with_capacity(m + n);
    let mut rhs = Vec::with_capacity(m + n);
    for i in 0..m {
        let mut row = vec![0.0; m * n];
        for j in 0..n {
            row[i * n + j] = 1.0;
        }
        rows.push(row);
        rhs.push(a.weights[i]);
    }
    for j in 0..n {
        let mut row = vec![0.0; m * n];
        for i in 0..m {
            row[i * n + j] = 1.0;
        }
        rows.push(row);
        rhs.push(b.weights[j]);
    }
    simplex_min(&c, &rows, &rhs).max(0.0).powf(1.0 / p as f64)
}

/// Random atom cloud with `1..=max_atoms` atoms and normalized positive
/// weights, coordinates in `[-3, 3]`.
pub fn random_cloud(rng: &mut ChaCha8Rng, dim: usize, max_atoms: usize) -> AtomCloud<f64> {
    let count = rng.gen_range(1..=max_atoms);
    let points: Vec<[f64; 2]> = (0..count)
        .map(|_| {
            [
                rng.gen_range(-3.0..3.0),
                if dim == 2 { rng.gen_range(-3.0..3.0) } else { 0.0 },
            ]
        })
        .collect();
    let raw: Vec<f64> = (0..count).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let weights = raw.iter().map(|w| w / total).collect();
    AtomCloud::new(dim, points, weights).unwrap()
}
