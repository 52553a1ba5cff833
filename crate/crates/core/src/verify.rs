//! Independent checks of an emitted certificate against the true model.
//!
//! These read the oracle side (`A`, `B`, noise moments) and are never called
//! by synthesis. Grid checks are falsification aids; the proof is the SOS
//! constraint.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::noise::{draw, true_second_moment, NoiseSpec, SeedStream};
use crate::region::{BoxSet, RegionSpec};
use crate::synth::Certificate;
use crate::system::{simulate_closed, Controller, SystemError, SystemModel};

/// One-sided standard normal quantile at 0.999.
pub const Z_999: f64 = 3.090_232_306_167_813;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifyError {
    #[error("at least {min} runs required, got {got}")]
    TooFewRuns { min: usize, got: usize },
    #[error("dimension mismatch: certificate has n = {cert}, model has n = {model}")]
    Dimension { cert: usize, model: usize },
    #[error(transparent)]
    System(#[from] SystemError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleReport {
    pub points: usize,
    /// `max E[B(x+)] - kappa B(x) - psi` over the grid.
    pub worst_margin: f64,
    pub worst_point: Vec<f64>,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelsReport {
    /// `eta - max B` over the initial-box grid.
    pub eta_margin: f64,
    /// `min B - delta` over the unsafe-box grids.
    pub delta_margin: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyReport {
    pub runs: usize,
    pub horizon: usize,
    pub safe: usize,
    pub fraction: f64,
    /// One-sided Wilson lower bound at 0.999.
    pub wilson_lower: f64,
    pub wilson_upper: f64,
    pub target: f64,
    /// Lower bound at or above the certified level.
    pub lower_bound_meets: bool,
    /// The certified level is not refuted at 0.999.
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyReport {
    pub repetitions: usize,
    pub violations: usize,
    pub frequency: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub grid_per_axis: usize,
    pub martingale: MartingaleReport,
    pub levels: LevelsReport,
    pub safety: Option<SafetyReport>,
    pub pass: bool,
}

fn quad(p: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    (x.transpose() * p * x)[(0, 0)]
}

/// `E[B(x+)] = m^T P m + Tr(P Sigma)` with `m = A F(x) + B G(x) u + mu`.
pub fn expected_next(model: &SystemModel, p: &DMatrix<f64>, ctrl: &Controller, x: &[f64]) -> Result<f64, VerifyError> {
    let u = ctrl.input(x)?;
    let m = model.drift(x, u.as_slice())? + model.noise.mean();
    Ok(quad(p, &m) + (p * model.noise.covariance()).trace())
}

pub fn check_martingale(
    model: &SystemModel,
    cert: &Certificate,
    grid_box: &BoxSet,
    per_axis: usize,
    tolerance: f64,
) -> Result<MartingaleReport, VerifyError> {
    if cert.n != model.n {
        return Err(VerifyError::Dimension {
            cert: cert.n,
            model: model.n,
        });
    }
    let p = cert.p_matrix();
    let ctrl = cert.controller();
    let mut worst = f64::NEG_INFINITY;
    let mut worst_point = Vec::new();
    let grid = grid_box.grid(per_axis);
    for x in &grid {
        let e = expected_next(model, &p, &ctrl, x)?;
        let margin = e - cert.kappa * quad(&p, &DVector::from_column_slice(x)) - cert.psi;
        if margin > worst {
            worst = margin;
            worst_point = x.clone();
        }
    }
    Ok(MartingaleReport {
        points: grid.len(),
        worst_margin: worst,
        worst_point,
        tolerance,
        pass: worst <= tolerance,
    })
}

pub fn check_levels(cert: &Certificate, regions: &RegionSpec, per_axis: usize) -> LevelsReport {
    let p = cert.p_matrix();
    let b = |x: &Vec<f64>| quad(&p, &DVector::from_column_slice(x));
    let max_init = regions.initial_box.grid(per_axis).iter().map(b).fold(f64::NEG_INFINITY, f64::max);
    let min_unsafe = regions
        .unsafe_boxes
        .iter()
        .flat_map(|u| u.grid(per_axis))
        .map(|x| b(&x))
        .fold(f64::INFINITY, f64::min);
    let tolerance = 1e-9 * cert.delta.abs().max(1.0);
    let eta_margin = cert.eta - max_init;
    let delta_margin = if min_unsafe.is_finite() { min_unsafe - cert.delta } else { f64::INFINITY };
    LevelsReport {
        eta_margin,
        delta_margin,
        tolerance,
        pass: eta_margin >= -tolerance && delta_margin >= -tolerance,
    }
}

/// One-sided Wilson bounds `(lower, upper)` for `k` successes in `n`.
pub fn wilson_bounds(k: usize, n: usize, z: f64) -> (f64, f64) {
    let nf = n as f64;
    let ph = k as f64 / nf;
    let z2 = z * z;
    let centre = ph + z2 / (2.0 * nf);
    let half = z * (ph * (1.0 - ph) / nf + z2 / (4.0 * nf * nf)).sqrt();
    let den = 1.0 + z2 / nf;
    (((centre - half) / den).max(0.0), ((centre + half) / den).min(1.0))
}

fn uniform_in<R: Rng + ?Sized>(b: &BoxSet, rng: &mut R) -> Vec<f64> {
    b.lo().iter().zip(b.hi()).map(|(a, c)| a + (c - a) * rng.random::<f64>()).collect()
}

/// Safety flags per run; run `i` uses stream `i` of `seed`.
pub fn safety_runs(
    model: &SystemModel,
    ctrl: &Controller,
    regions: &RegionSpec,
    horizon: usize,
    runs: usize,
    seed: u64,
) -> Result<Vec<bool>, VerifyError> {
    let stream = SeedStream::new(seed);
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(runs).max(1);
    let mut out = vec![false; runs];
    let results: Vec<Result<Vec<(usize, bool)>, VerifyError>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                s.spawn(move || {
                    let mut local = Vec::new();
                    for i in (w..runs).step_by(workers) {
                        let mut rng = stream.rng(i as u64);
                        let x0 = uniform_in(&regions.initial_box, &mut rng);
                        let run = simulate_closed(model, ctrl, &x0, horizon, &regions.unsafe_boxes, &mut rng, false)?;
                        local.push((i, run.safe()));
                    }
                    Ok(local)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("safety worker panicked")).collect()
    });
    for r in results {
        for (i, safe) in r? {
            out[i] = safe;
        }
    }
    Ok(out)
}

pub fn mc_safety(
    model: &SystemModel,
    cert: &Certificate,
    regions: &RegionSpec,
    horizon: usize,
    runs: usize,
    seed: u64,
) -> Result<SafetyReport, VerifyError> {
    if runs < 1000 {
        return Err(VerifyError::TooFewRuns { min: 1000, got: runs });
    }
    let flags = safety_runs(model, &cert.controller(), regions, horizon, runs, seed)?;
    let safe = flags.iter().filter(|&&f| f).count();
    let (lo, hi) = wilson_bounds(safe, runs, Z_999);
    let target = 1.0 - cert.beta1;
    Ok(SafetyReport {
        runs,
        horizon,
        safe,
        fraction: safe as f64 / runs as f64,
        wilson_lower: lo,
        wilson_upper: hi,
        target,
        lower_bound_meets: lo >= target,
        pass: hi >= target,
    })
}

/// Frequency of `|(1/N) sum s s^T - E[s s^T]|_F >= eps` over fresh draws.
pub fn lemma1_frequency(
    noise: &NoiseSpec,
    n_samples: usize,
    epsilon: f64,
    repetitions: usize,
    bound: f64,
    seed: u64,
) -> Result<FrequencyReport, VerifyError> {
    if repetitions < 1000 {
        return Err(VerifyError::TooFewRuns {
            min: 1000,
            got: repetitions,
        });
    }
    let m = true_second_moment(noise);
    let stream = SeedStream::new(seed);
    let d = noise.dim();
    let mut violations = 0;
    for r in 0..repetitions {
        let mut rng = stream.rng(r as u64);
        let mut acc = DMatrix::zeros(d, d);
        for _ in 0..n_samples {
            let s = draw(noise, &mut rng);
            acc += &s * s.transpose();
        }
        acc /= n_samples as f64;
        if (acc - &m).norm() >= epsilon {
            violations += 1;
        }
    }
    let frequency = violations as f64 / repetitions as f64;
    Ok(FrequencyReport {
        repetitions,
        violations,
        frequency,
        bound,
        pass: frequency <= bound,
    })
}

/// Levels, martingale and (optionally) Monte Carlo safety in one report.
pub fn verify_certificate(
    model: &SystemModel,
    cert: &Certificate,
    regions: &RegionSpec,
    per_axis: usize,
    mc: Option<(usize, u64)>,
) -> Result<VerificationReport, VerifyError> {
    let martingale = check_martingale(model, cert, &regions.state_box, per_axis, 1e-6)?;
    let levels = check_levels(cert, regions, per_axis);
    let safety = match mc {
        Some((runs, seed)) => Some(mc_safety(model, cert, regions, cert.horizon as usize, runs, seed)?),
        None => None,
    };
    let pass = martingale.pass && levels.pass && safety.as_ref().is_none_or(|s| s.pass);
    Ok(VerificationReport {
        grid_per_axis: per_axis,
        martingale,
        levels,
        safety,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::NoiseKind;
    use crate::polyalg::{make_dictionary, Monomial, PolyMatrix};
    use crate::synth::{Beta1Branch, ControllerTerm, GuaranteeMode, SolverRecord};

    fn cert_with(p: DMatrix<f64>, kappa: f64, psi: f64, m: usize) -> Certificate {
        let n = p.nrows();
        Certificate {
            n,
            m,
            p: (0..n * n).map(|i| p[(i / n, i % n)]).collect(),
            controller: vec![ControllerTerm {
                exponents: vec![0; n],
                coeffs: vec![0.0; m * n],
            }],
            eta: 1.0,
            delta: 10.0,
            psi,
            kappa,
            rho: 1.0,
            horizon: 10,
            beta1: 0.5,
            beta1_branch: Beta1Branch::Relaxed,
            beta1_theorem: None,
            beta1_relaxed: 0.5,
            beta1_infinite: None,
            beta2: 0.0,
            beta2bar: 0.0,
            data_horizon: 1,
            confidence_vacuous: false,
            mode: GuaranteeMode::Stochastic,
            batch_hash: String::new(),
            solver: SolverRecord {
                status: "optimal".into(),
                iterations: 0,
                primal_residual: 0.0,
                dual_residual: 0.0,
                gap: 0.0,
                iterate_hash: String::new(),
            },
        }
    }

    fn linear_model(a: f64, noise: NoiseSpec) -> SystemModel {
        let n = noise.dim();
        SystemModel::new(
            DMatrix::identity(n, n) * a,
            DMatrix::zeros(n, n),
            make_dictionary(n, 1).unwrap(),
            PolyMatrix::identity(n, n),
            noise,
            BoxSet::cube(n, -1.0, 1.0).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn dynamics_free_expectation_is_trace() {
        let sigma = DMatrix::identity(2, 2) * 0.01;
        let model = linear_model(0.0, NoiseSpec::gaussian_at_bound(sigma.clone()).unwrap());
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let psi = (&p * &sigma).trace();
        let cert = cert_with(p, 0.3, psi, 2);
        let r = check_martingale(&model, &cert, &BoxSet::cube(2, -1.0, 1.0).unwrap(), 5, 1e-12).unwrap();
        assert!(r.pass);
        // Worst point is the origin where kappa B vanishes.
        assert!(r.worst_margin.abs() < 1e-15);
    }

    #[test]
    fn corrupted_p_fails_martingale() {
        let sigma = DMatrix::identity(2, 2) * 0.01;
        let mut model = linear_model(0.5, NoiseSpec::gaussian_at_bound(sigma.clone()).unwrap());
        model.a[(0, 1)] = 0.4;
        let p = DMatrix::identity(2, 2);
        let cert = cert_with(p.clone(), 0.7, (&p * &sigma).trace(), 2);
        let b = BoxSet::cube(2, -1.0, 1.0).unwrap();
        assert!(check_martingale(&model, &cert, &b, 5, 1e-9).unwrap().pass);
        let bad = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 0.05]));
        let cert = cert_with(bad.clone(), 0.7, (&bad * &sigma).trace(), 2);
        assert!(!check_martingale(&model, &cert, &b, 5, 1e-9).unwrap().pass);
    }

    #[test]
    fn exact_expectation_matches_monte_carlo() {
        let noise = NoiseSpec::new(
            NoiseKind::Gaussian {
                mean: DVector::from_vec(vec![0.05, -0.02]),
                cov: DMatrix::from_row_slice(2, 2, &[0.02, 0.005, 0.005, 0.01]),
            },
            DMatrix::identity(2, 2) * 0.01,
            DMatrix::identity(2, 2) * 0.03,
        )
        .unwrap();
        let mut model = linear_model(0.8, noise);
        model.b = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 1.0]);
        let p = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]);
        let mut kg = PolyMatrix::zeros(2, 2, 2);
        kg.set(0, 0, crate::polyalg::Poly::monomial(-0.3, Monomial::var(2, 1)));
        kg.set(1, 1, crate::polyalg::Poly::constant(2, -0.2));
        let ctrl = Controller { kgain: kg };
        let stream = SeedStream::new(99);
        let mut pts = stream.rng(u64::MAX);
        for k in 0..20 {
            let x = vec![pts.random_range(-1.0..1.0), pts.random_range(-1.0..1.0)];
            let exact = expected_next(&model, &p, &ctrl, &x).unwrap();
            let u = ctrl.input(&x).unwrap();
            let drift = model.drift(&x, u.as_slice()).unwrap();
            let mut rng = stream.rng(k);
            let count = 1_000_000;
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..count {
                let v = quad(&p, &(&drift + draw(&model.noise, &mut rng)));
                s1 += v;
                s2 += v * v;
            }
            let mean = s1 / count as f64;
            let se = ((s2 / count as f64 - mean * mean) / count as f64).sqrt();
            assert!((mean - exact).abs() <= 3.0 * se, "point {k}: {mean} vs {exact} (se {se})");
        }
    }

    #[test]
    fn level_margins() {
        let cert = Certificate {
            eta: 3.0,
            delta: 108.0,
            ..cert_with(DMatrix::identity(3, 3), 0.5, 0.0, 1)
        };
        let regions = RegionSpec::new(
            BoxSet::cube(3, -10.0, 10.0).unwrap(),
            BoxSet::cube(3, -1.0, 1.0).unwrap(),
            vec![BoxSet::cube(3, 6.0, 10.0).unwrap(), BoxSet::cube(3, -10.0, -6.0).unwrap()],
        )
        .unwrap();
        let r = check_levels(&cert, &regions, 5);
        assert!(r.pass);
        assert_eq!(r.eta_margin, 0.0);
        assert!(r.delta_margin >= -1e-9);
        let shrunk = Certificate { eta: 2.7, ..cert };
        assert!(!check_levels(&shrunk, &regions, 5).pass);
    }

    #[test]
    fn empty_unsafe_set_always_safe() {
        let model = linear_model(0.5, NoiseSpec::gaussian_at_bound(DMatrix::identity(1, 1) * 0.01).unwrap());
        let regions = RegionSpec::new(BoxSet::cube(1, -10.0, 10.0).unwrap(), BoxSet::cube(1, -1.0, 1.0).unwrap(), vec![]).unwrap();
        let cert = cert_with(DMatrix::identity(1, 1), 0.5, 0.01, 1);
        let r = mc_safety(&model, &cert, &regions, 20, 1000, 3).unwrap();
        assert_eq!(r.fraction, 1.0);
        assert!(matches!(mc_safety(&model, &cert, &regions, 20, 999, 3), Err(VerifyError::TooFewRuns { .. })));
    }

    #[test]
    fn wilson_all_successes() {
        let (lo, hi) = wilson_bounds(10_000, 10_000, Z_999);
        assert!((lo - 1.0 / (1.0 + Z_999 * Z_999 / 1e4)).abs() < 1e-12);
        assert_eq!(hi, 1.0);
    }

    #[test]
    fn frequency_point_mass_and_tight_eps() {
        let pm = NoiseSpec::new(NoiseKind::PointMass { dim: 2 }, DMatrix::zeros(2, 2), DMatrix::zeros(2, 2)).unwrap();
        assert_eq!(lemma1_frequency(&pm, 10, 1e-9, 1000, 0.0, 1).unwrap().violations, 0);
        let g = NoiseSpec::gaussian_at_bound(DMatrix::identity(3, 3) * 0.006).unwrap();
        let r = lemma1_frequency(&g, 5, 1e-6, 1000, 1.0, 1).unwrap();
        assert!(r.frequency > 0.99);
    }
}
