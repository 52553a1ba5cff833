//! Properties of the guarantee formulas, the unsafe-level oracle and the
//! Monte Carlo safety estimate.

mod common;

use nalgebra::DMatrix;
use proptest::prelude::*;
use scbc::noise::NoiseSpec;
use scbc::polyalg::{make_dictionary, PolyMatrix};
use scbc::region::{BoxSet, RegionSpec};
use scbc::synth::{beta1, beta1_relaxed, level_delta};
use scbc::system::{Controller, SystemModel};
use scbc::verify::safety_runs;

#[test]
fn level_delta_matches_brute_force() {
    for n in [2, 3] {
        for seed in 0..50 {
            let (p, b) = common::random_level_instance(1000 * n as u64 + seed, n);
            let exact = level_delta(&p, std::slice::from_ref(&b)).unwrap();
            let brute = common::grid_min(&p, &b);
            assert!((exact - brute).abs() <= 1e-6, "n {n} seed {seed}: {exact} vs {brute}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn beta1_is_scale_invariant(
        ratio in 0.01f64..0.9,
        psi_frac in 0.0f64..0.05,
        kappa in 0.05f64..0.999,
        horizon in 1u32..200,
        c in 1e-3f64..1e3,
    ) {
        let (eta, delta) = (ratio * 7.0, 7.0);
        let psi = psi_frac * delta;
        let a = beta1(eta, delta, psi, kappa, horizon).unwrap();
        let b = beta1(c * eta, c * delta, c * psi, kappa, horizon).unwrap();
        prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        let a = beta1_relaxed(eta, delta, psi, horizon).unwrap();
        let b = beta1_relaxed(c * eta, c * delta, c * psi, horizon).unwrap();
        prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }

    /// The gap to the relaxed bound is first order in `(1 - kappa) T`, so the
    /// 1e-4 agreement at `1 - 1e-6` covers horizons up to 100; a closer
    /// `kappa` tightens it for longer horizons.
    #[test]
    fn kappa_to_one_recovers_relaxed_bound(ratio in 0.01f64..0.5, psi_frac in 1e-6f64..1e-3, horizon in 1u32..=100, long in 100u32..1000) {
        let (eta, delta) = (ratio, 1.0);
        let psi = psi_frac * delta;
        let near = beta1(eta, delta, psi, 1.0 - 1e-6, horizon).unwrap();
        let relaxed = beta1_relaxed(eta, delta, psi, horizon).unwrap();
        prop_assert!((near - relaxed).abs() <= 1e-4, "{near} vs {relaxed}");
        let near = beta1(eta, delta, psi, 1.0 - 1e-9, long).unwrap();
        let relaxed = beta1_relaxed(eta, delta, psi, long).unwrap();
        prop_assert!((near - relaxed).abs() <= 1e-4, "T = {long}: {near} vs {relaxed}");
    }
}

fn scalar_model(a: f64, std: f64) -> SystemModel {
    SystemModel::new(
        DMatrix::from_element(1, 1, a),
        DMatrix::from_element(1, 1, 1.0),
        make_dictionary(1, 1).unwrap(),
        PolyMatrix::identity(1, 1),
        NoiseSpec::gaussian_at_bound(DMatrix::from_element(1, 1, std * std)).unwrap(),
        BoxSet::cube(1, -1.0, 1.0).unwrap(),
    )
    .unwrap()
}

#[test]
fn safety_is_monotone_in_horizon() {
    let regions = RegionSpec::new(
        BoxSet::cube(1, -10.0, 10.0).unwrap(),
        BoxSet::cube(1, -1.0, 1.0).unwrap(),
        vec![BoxSet::cube(1, 2.0, 10.0).unwrap()],
    )
    .unwrap();
    let model = scalar_model(1.02, 0.3);
    let ctrl = Controller::zero(1, 1);
    let horizons = [1usize, 5, 20, 50, 100];
    let runs: Vec<Vec<bool>> = horizons.iter().map(|&h| safety_runs(&model, &ctrl, &regions, h, 2000, 5).unwrap()).collect();
    for w in runs.windows(2) {
        for (short, long) in w[0].iter().zip(&w[1]) {
            assert!(*short || !*long, "a run unsafe early is safe later");
        }
        let f = |r: &Vec<bool>| r.iter().filter(|s| **s).count();
        assert!(f(&w[0]) >= f(&w[1]));
    }
    let first = runs[0].iter().filter(|s| **s).count();
    let last = runs[horizons.len() - 1].iter().filter(|s| **s).count();
    assert!(last < first, "horizon should matter for this unstable model");
}
