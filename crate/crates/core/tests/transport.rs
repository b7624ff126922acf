//! Wasserstein distances against an independent exhaustive-LP simplex
//! oracle, plus metric-space properties under randomized inputs.

mod common;

use common::{lp_wasserstein, random_cloud};
use mfc_core::measures::{wasserstein1, wasserstein2, AtomCloud, EmpiricalMeasure};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn oracle_agreement_on_random_pairs() {
    // 100 pairs per dimension, atoms capped at 6 each.
    let mut rng = ChaCha8Rng::seed_from_u64(0x0f1e_2d3c);
    for dim in [1usize, 2] {
        for _ in 0..100 {
            let a = random_cloud(&mut rng, dim, 6);
            let b = random_cloud(&mut rng, dim, 6);
            let d1 = wasserstein1(&a, &b).unwrap();
            let d2 = wasserstein2(&a, &b).unwrap();
            let o1 = lp_wasserstein(&a, &b, 1);
            let o2 = lp_wasserstein(&a, &b, 2);
            assert!((d1 - o1).abs() <= 1e-9, "d1 {d1} vs oracle {o1} (dim {dim})");
            assert!((d2 - o2).abs() <= 1e-9, "d2 {d2} vs oracle {o2} (dim {dim})");
        }
    }
}

#[test]
fn simplex_oracle_sanity() {
    // Two diracs at distance 2: both distances equal the separation.
    let a = AtomCloud::new(1, vec![[0.0, 0.0]], vec![1.0]).unwrap();
    let b = AtomCloud::new(1, vec![[2.0, 0.0]], vec![1.0]).unwrap();
    assert!((lp_wasserstein(&a, &b, 1) - 2.0).abs() < 1e-12);
    assert!((lp_wasserstein(&a, &b, 2) - 2.0).abs() < 1e-12);
    // Split target: half the mass moves 1, half moves 3 -> d1 = 2,
    // d2 = sqrt((1 + 9)/2).
    let c = AtomCloud::new(1, vec![[1.0, 0.0], [3.0, 0.0]], vec![0.5, 0.5]).unwrap();
    assert!((lp_wasserstein(&a, &c, 1) - 2.0).abs() < 1e-12);
    assert!((lp_wasserstein(&a, &c, 2) - 5.0_f64.sqrt()).abs() < 1e-12);
}

/// Strategy: a small cloud encoded as (points, raw weights).
fn cloud_strategy(dim: usize) -> impl Strategy<Value = AtomCloud<f64>> {
    prop::collection::vec((-3.0..3.0f64, -3.0..3.0f64, 0.05..1.0f64), 1..6).prop_map(
        move |atoms| {
            let total: f64 = atoms.iter().map(|a| a.2).sum();
            let points = atoms
                .iter()
                .map(|&(x, y, _)| [x, if dim == 2 { y } else { 0.0 }])
                .collect();
            let weights = atoms.iter().map(|a| a.2 / total).collect();
            AtomCloud::new(dim, points, weights).unwrap()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn identity_symmetry_and_order(a in cloud_strategy(1), b in cloud_strategy(1)) {
        let d1 = wasserstein1(&a, &b).unwrap();
        let d1_rev = wasserstein1(&b, &a).unwrap();
        let d2 = wasserstein2(&a, &b).unwrap();
        prop_assert!((d1 - d1_rev).abs() <= 1e-9, "symmetry: {d1} vs {d1_rev}");
        prop_assert!(d1 <= d2 + 1e-9, "d1 {d1} should not exceed d2 {d2}");
        let self_d = wasserstein1(&a, &a).unwrap();
        prop_assert!(self_d.abs() <= 1e-9, "self distance {self_d}");
    }

    #[test]
    fn triangle_inequality(
        a in cloud_strategy(2),
        b in cloud_strategy(2),
        c in cloud_strategy(2),
    ) {
        let ab = wasserstein1(&a, &b).unwrap();
        let bc = wasserstein1(&b, &c).unwrap();
        let ac = wasserstein1(&a, &c).unwrap();
        prop_assert!(ac <= ab + bc + 1e-8, "triangle: {ac} > {ab} + {bc}");
    }

    #[test]
    fn one_dimensional_d1_is_cdf_area(xs in prop::collection::vec(-3.0..3.0f64, 1..8),
                                      ys in prop::collection::vec(-3.0..3.0f64, 1..8)) {
        // For equal-weight empirical measures in 1D, d1 equals the L1
        // distance between the CDFs, evaluated here by brute-force quantile
        // coupling on the common-denominator refinement.
        let a = EmpiricalMeasure::new(1, xs.iter().map(|&x| [x, 0.0]).collect()).unwrap();
        let b = EmpiricalMeasure::new(1, ys.iter().map(|&y| [y, 0.0]).collect()).unwrap();
        let d1 = wasserstein1(&a, &b).unwrap();
        let mut sx = xs.clone();
        let mut sy = ys.clone();
        sx.sort_by(|p, q| p.partial_cmp(q).unwrap());
        sy.sort_by(|p, q| p.partial_cmp(q).unwrap());
        let l = num_integer_lcm(sx.len(), sy.len());
        let quantile_cost: f64 = (0..l)
            .map(|i| (sx[i * sx.len() / l] - sy[i * sy.len() / l]).abs())
            .sum::<f64>()
            / l as f64;
        prop_assert!((d1 - quantile_cost).abs() <= 1e-9, "{d1} vs {quantile_cost}");
    }
}

fn num_integer_lcm(a: usize, b: usize) -> usize {
    fn gcd(mut a: usize, mut b: usize) -> usize {
        while b != 0 {
            let t = a % b;
            a = b;
            b = t;
        }
        a
    }
    a / gcd(a, b) * b
}
