//! Ground-truth polynomial systems `x+ = A F(x) + B G(x) u + s`, simulation,
//! and the three benchmark models.
//!
//! `A`, `B` and the noise distribution are oracle data: they generate
//! trajectories and feed the verification checks, and nothing on the
//! synthesis path reads them.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::noise::{draw, NoiseError, NoiseSpec};
use crate::polyalg::{eval_basis, Monomial, MonomialBasis, PolyError, PolyMatrix};
use crate::region::{BoxSet, RegionError, RegionSpec};

/// States with `|x|_inf` above this abort a simulation.
pub const DIVERGENCE_GUARD: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SystemError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("state dictionary contains a constant monomial")]
    ConstantInDictionary,
    #[error("state diverged at step {step} (|x|_inf = {norm:e})")]
    Diverged { step: usize, norm: f64 },
    #[error("unknown benchmark '{0}'")]
    UnknownBenchmark(String),
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Region(#[from] RegionError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    pub n: usize,
    pub m: usize,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub f_basis: MonomialBasis,
    pub g_poly: PolyMatrix,
    pub noise: NoiseSpec,
    /// Per-coordinate input bounds used for excitation.
    pub input_box: BoxSet,
}

impl SystemModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        f_basis: MonomialBasis,
        g_poly: PolyMatrix,
        noise: NoiseSpec,
        input_box: BoxSet,
    ) -> Result<Self, SystemError> {
        let n = f_basis.nvars();
        let m = g_poly.cols();
        let check = |what, expected, got| {
            if expected == got {
                Ok(())
            } else {
                Err(SystemError::Dimension { what, expected, got })
            }
        };
        check("A rows", n, a.nrows())?;
        check("A cols", f_basis.len(), a.ncols())?;
        check("B rows", n, b.nrows())?;
        check("B cols", g_poly.rows(), b.ncols())?;
        check("G variables", n, g_poly.nvars())?;
        check("noise dimension", n, noise.dim())?;
        check("input box", m, input_box.dim())?;
        if !f_basis.is_state_dictionary() {
            return Err(SystemError::ConstantInDictionary);
        }
        Ok(Self {
            n,
            m,
            a,
            b,
            f_basis,
            g_poly,
            noise,
            input_box,
        })
    }

    pub fn l(&self) -> usize {
        self.f_basis.len()
    }

    pub fn q(&self) -> usize {
        self.g_poly.rows()
    }

    /// `[A B]`.
    pub fn phi(&self) -> DMatrix<f64> {
        let mut phi = DMatrix::zeros(self.n, self.l() + self.q());
        phi.view_mut((0, 0), (self.n, self.l())).copy_from(&self.a);
        phi.view_mut((0, self.l()), (self.n, self.q())).copy_from(&self.b);
        phi
    }

    /// Noise-free part `A F(x) + B G(x) u`.
    pub fn drift(&self, x: &[f64], u: &[f64]) -> Result<DVector<f64>, SystemError> {
        if x.len() != self.n {
            return Err(SystemError::Dimension {
                what: "state",
                expected: self.n,
                got: x.len(),
            });
        }
        if u.len() != self.m {
            return Err(SystemError::Dimension {
                what: "input",
                expected: self.m,
                got: u.len(),
            });
        }
        let f = eval_basis(&self.f_basis, x)?;
        let g = self.g_poly.eval(x)?;
        Ok(&self.a * f + &self.b * (g * DVector::from_column_slice(u)))
    }
}

/// One transition `A F(x) + B G(x) u + s`.
pub fn step(model: &SystemModel, x: &[f64], u: &[f64], s: &[f64]) -> Result<DVector<f64>, SystemError> {
    if s.len() != model.n {
        return Err(SystemError::Dimension {
            what: "noise",
            expected: model.n,
            got: s.len(),
        });
    }
    Ok(model.drift(x, u)? + DVector::from_column_slice(s))
}

/// State feedback `u = K(x) x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Controller {
    pub kgain: PolyMatrix,
}

impl Controller {
    pub fn zero(m: usize, n: usize) -> Self {
        Self {
            kgain: PolyMatrix::zeros(m, n, n),
        }
    }

    pub fn input(&self, x: &[f64]) -> Result<DVector<f64>, SystemError> {
        Ok(self.kgain.eval(x)? * DVector::from_column_slice(x))
    }
}

/// Open-loop run: states `x(0..=T)` and the noise draws that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenRun {
    pub states: Vec<DVector<f64>>,
    pub noise: Vec<DVector<f64>>,
}

fn guard(x: &DVector<f64>, step: usize) -> Result<(), SystemError> {
    let norm = x.amax();
    if !norm.is_finite() || norm > DIVERGENCE_GUARD || x.iter().any(|v| !v.is_finite()) {
        return Err(SystemError::Diverged { step, norm });
    }
    Ok(())
}

/// Applies `inputs` (one column per step) from `x0`, drawing fresh noise.
pub fn simulate_open<R: Rng + ?Sized>(
    model: &SystemModel,
    x0: &[f64],
    inputs: &DMatrix<f64>,
    rng: &mut R,
) -> Result<OpenRun, SystemError> {
    if inputs.nrows() != model.m && inputs.ncols() > 0 {
        return Err(SystemError::Dimension {
            what: "input rows",
            expected: model.m,
            got: inputs.nrows(),
        });
    }
    let mut x = DVector::from_column_slice(x0);
    let mut states = vec![x.clone()];
    let mut noise = Vec::with_capacity(inputs.ncols());
    for j in 0..inputs.ncols() {
        let s = draw(&model.noise, rng);
        let u: Vec<f64> = inputs.column(j).iter().copied().collect();
        x = step(model, x.as_slice(), &u, s.as_slice())?;
        guard(&x, j + 1)?;
        states.push(x.clone());
        noise.push(s);
    }
    Ok(OpenRun { states, noise })
}

/// Closed-loop run with the first step at which the unsafe set was hit.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedRun {
    pub states: Vec<DVector<f64>>,
    pub first_unsafe: Option<usize>,
    /// Set when the divergence guard stopped the run early.
    pub diverged: bool,
}

impl ClosedRun {
    pub fn safe(&self) -> bool {
        self.first_unsafe.is_none() && !self.diverged
    }
}

/// Runs `u(k) = K(x(k)) x(k)` for `horizon` steps, checking `x(0..=horizon)`
/// against `unsafe_boxes`. Divergence ends the run and counts as unsafe.
pub fn simulate_closed<R: Rng + ?Sized>(
    model: &SystemModel,
    controller: &Controller,
    x0: &[f64],
    horizon: usize,
    unsafe_boxes: &[BoxSet],
    rng: &mut R,
    keep_states: bool,
) -> Result<ClosedRun, SystemError> {
    let hit = |x: &DVector<f64>| unsafe_boxes.iter().any(|b| b.contains(x.as_slice()));
    let mut x = DVector::from_column_slice(x0);
    let mut states = Vec::new();
    if keep_states {
        states.push(x.clone());
    }
    if hit(&x) {
        return Ok(ClosedRun {
            states,
            first_unsafe: Some(0),
            diverged: false,
        });
    }
    for k in 1..=horizon {
        let u = controller.input(x.as_slice())?;
        let s = draw(&model.noise, rng);
        x = step(model, x.as_slice(), u.as_slice(), s.as_slice())?;
        if guard(&x, k).is_err() {
            return Ok(ClosedRun {
                states,
                first_unsafe: Some(k),
                diverged: true,
            });
        }
        if keep_states {
            states.push(x.clone());
        }
        if hit(&x) {
            return Ok(ClosedRun {
                states,
                first_unsafe: Some(k),
                diverged: false,
            });
        }
    }
    Ok(ClosedRun {
        states,
        first_unsafe: None,
        diverged: false,
    })
}

/// Benchmark knobs the source leaves open.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkOptions {
    pub tau: f64,
    /// Spacecraft principal inertias.
    pub inertia: [f64; 3],
    /// Replaces the default zero-mean gaussian with covariance `gamma_sigma`.
    pub noise: Option<NoiseSpec>,
    pub input_bound: f64,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        Self {
            tau: 0.01,
            inertia: [20.0, 18.0, 15.0],
            noise: None,
            input_bound: 10.0,
        }
    }
}

/// Published experiment settings for a benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkTable {
    pub n_samples: usize,
    pub horizon_data: usize,
    pub horizon_safety: usize,
    pub epsilon: f64,
    pub gamma_sigma: f64,
}

pub const BENCHMARKS: [&str; 3] = ["lorenz", "chen", "spacecraft"];

pub fn benchmark_table(name: &str) -> Result<BenchmarkTable, SystemError> {
    let (n_samples, horizon_data, epsilon, gamma_sigma) = match name {
        "lorenz" => (77, 10, 0.1, 0.006),
        "chen" => (328, 7, 0.2, 0.008),
        "spacecraft" => (1013, 8, 0.01, 0.0075),
        other => return Err(SystemError::UnknownBenchmark(other.to_string())),
    };
    Ok(BenchmarkTable {
        n_samples,
        horizon_data,
        horizon_safety: 100,
        epsilon,
        gamma_sigma,
    })
}

fn basis3(rows: &[[u32; 3]]) -> MonomialBasis {
    MonomialBasis::new(3, rows.iter().map(|r| Monomial::new(r.to_vec())).collect())
        .expect("distinct monomials")
}

/// Benchmark dynamics, dictionary and regions.
pub fn benchmark(name: &str, opts: &BenchmarkOptions) -> Result<(SystemModel, RegionSpec), SystemError> {
    let table = benchmark_table(name)?;
    let tau = opts.tau;
    let noise = match &opts.noise {
        Some(s) => s.clone(),
        None => NoiseSpec::gaussian_at_bound(DMatrix::identity(3, 3) * table.gamma_sigma)?,
    };
    let state_box = BoxSet::cube(3, -10.0, 10.0)?;
    let unsafe_boxes = vec![BoxSet::cube(3, -10.0, -6.0)?, BoxSet::cube(3, 6.0, 10.0)?];
    let (a, b, f_basis, m, initial_box) = match name {
        "lorenz" => {
            let f = basis3(&[
                [1, 0, 0],
                [0, 1, 0],
                [0, 0, 1],
                [1, 1, 0],
                [1, 0, 1],
                [0, 1, 1],
                [2, 0, 0],
                [0, 2, 0],
                [0, 0, 2],
            ]);
            let mut a = DMatrix::zeros(3, 9);
            a[(0, 0)] = 1.0 - 10.0 * tau;
            a[(0, 1)] = 10.0 * tau;
            a[(1, 0)] = 28.0 * tau;
            a[(1, 1)] = 1.0 - tau;
            a[(1, 3)] = -tau;
            a[(2, 2)] = 1.0 - 8.0 / 3.0 * tau;
            a[(2, 4)] = tau;
            let mut b = DMatrix::zeros(3, 1);
            b[(1, 0)] = tau;
            let init = BoxSet::new(vec![0.0, -1.5, -1.5], vec![1.5, 1.5, 1.5])?;
            (a, b, f, 1, init)
        }
        "chen" => {
            let f = basis3(&[[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 0], [1, 0, 1], [0, 1, 1]]);
            let mut a = DMatrix::zeros(3, 6);
            a[(0, 0)] = 1.0 - 35.0 * tau;
            a[(0, 1)] = 35.0 * tau;
            a[(1, 0)] = -7.0 * tau;
            a[(1, 1)] = 1.0 + 28.0 * tau;
            a[(1, 4)] = -tau;
            a[(2, 2)] = 1.0 - 3.0 * tau;
            a[(2, 3)] = tau;
            let mut b = DMatrix::zeros(3, 1);
            b[(1, 0)] = tau;
            (a, b, f, 1, BoxSet::cube(3, -1.0, 1.0)?)
        }
        "spacecraft" => {
            let [j1, j2, j3] = opts.inertia;
            let f = basis3(&[
                [1, 0, 0],
                [0, 1, 0],
                [0, 0, 1],
                [1, 1, 0],
                [1, 0, 1],
                [0, 1, 1],
                [2, 0, 0],
            ]);
            let mut a = DMatrix::zeros(3, 7);
            a[(0, 0)] = 1.0;
            a[(1, 1)] = 1.0;
            a[(2, 2)] = 1.0;
            a[(0, 5)] = tau * (j2 - j3) / j1;
            a[(1, 4)] = tau * (j3 - j1) / j2;
            a[(2, 3)] = tau * (j1 - j2) / j3;
            let b = DMatrix::from_diagonal(&DVector::from_vec(vec![tau / j1, tau / j2, tau / j3]));
            (a, b, f, 3, BoxSet::cube(3, -1.0, 1.0)?)
        }
        _ => unreachable!("checked by benchmark_table"),
    };
    let g = PolyMatrix::identity(m, 3);
    let input_box = BoxSet::cube(m, -opts.input_bound, opts.input_bound)?;
    let model = SystemModel::new(a, b, f_basis, g, noise, input_box)?;
    let regions = RegionSpec::new(state_box, initial_box, unsafe_boxes)?;
    Ok((model, regions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{NoiseKind, SeedStream};

    fn quiet(n: usize) -> NoiseSpec {
        NoiseSpec::new(NoiseKind::PointMass { dim: n }, DMatrix::zeros(n, n), DMatrix::zeros(n, n)).unwrap()
    }

    fn lorenz_quiet() -> SystemModel {
        let opts = BenchmarkOptions {
            noise: Some(quiet(3)),
            ..Default::default()
        };
        benchmark("lorenz", &opts).unwrap().0
    }

    fn toy() -> SystemModel {
        SystemModel::new(
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 1.0),
            crate::polyalg::make_dictionary(1, 1).unwrap(),
            PolyMatrix::identity(1, 1),
            quiet(1),
            BoxSet::cube(1, -1.0, 1.0).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn step_examples() {
        let mut m = lorenz_quiet();
        let x = step(&m, &[1.0, 0.0, 0.0], &[0.0], &[0.0; 3]).unwrap();
        assert!((x - DVector::from_vec(vec![0.9, 0.28, 0.0])).amax() < 1e-15);
        m.a.fill(0.0);
        m.b.fill(0.0);
        assert_eq!(step(&m, &[3.0, -2.0, 1.0], &[5.0], &[0.0; 3]).unwrap(), DVector::zeros(3));
        let x = step(&toy(), &[2.0], &[1.0], &[0.1]).unwrap();
        assert!((x[0] - 2.1).abs() < 1e-15);
    }

    #[test]
    fn step_dimension_errors() {
        let m = toy();
        assert!(step(&m, &[1.0, 2.0], &[0.0], &[0.0]).is_err());
        assert!(step(&m, &[1.0], &[0.0, 1.0], &[0.0]).is_err());
    }

    #[test]
    fn open_loop_composes_steps() {
        let m = lorenz_quiet();
        let x0 = [1.0, 0.0, 0.0];
        let run = simulate_open(&m, &x0, &DMatrix::zeros(1, 2), &mut SeedStream::new(1).rng(0)).unwrap();
        let s1 = step(&m, &x0, &[0.0], &[0.0; 3]).unwrap();
        let s2 = step(&m, s1.as_slice(), &[0.0], &[0.0; 3]).unwrap();
        assert_eq!(run.states[2], s2);
        let run = simulate_open(&m, &x0, &DMatrix::zeros(1, 0), &mut SeedStream::new(1).rng(0)).unwrap();
        assert_eq!(run.states, vec![DVector::from_vec(x0.to_vec())]);
    }

    #[test]
    fn open_loop_replays_recorded_noise() {
        let (m, _) = benchmark("chen", &BenchmarkOptions::default()).unwrap();
        let u = DMatrix::from_row_slice(1, 4, &[1.0, -2.0, 0.5, 3.0]);
        let run = simulate_open(&m, &[0.2, -0.1, 0.3], &u, &mut SeedStream::new(9).rng(2)).unwrap();
        let again = simulate_open(&m, &[0.2, -0.1, 0.3], &u, &mut SeedStream::new(9).rng(2)).unwrap();
        assert_eq!(run, again);
        for j in 0..4 {
            let x = step(&m, run.states[j].as_slice(), &[u[(0, j)]], run.noise[j].as_slice()).unwrap();
            assert_eq!(x, run.states[j + 1]);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let mut m = toy();
        m.a[(0, 0)] = 1e4;
        let r = simulate_open(&m, &[1.0], &DMatrix::zeros(1, 5), &mut SeedStream::new(0).rng(0));
        assert!(matches!(r, Err(SystemError::Diverged { step: 2, .. })));
    }

    #[test]
    fn closed_loop_flags() {
        let m = toy();
        let c = Controller::zero(1, 1);
        let mut rng = SeedStream::new(0).rng(0);
        let r = simulate_closed(&m, &c, &[0.5], 10, &[], &mut rng, false).unwrap();
        assert!(r.safe());
        let bad = BoxSet::cube(1, 0.4, 0.6).unwrap();
        let r = simulate_closed(&m, &c, &[0.5], 10, &[bad], &mut rng, false).unwrap();
        assert_eq!(r.first_unsafe, Some(0));
    }

    #[test]
    fn benchmark_shapes() {
        let (m, r) = benchmark("lorenz", &BenchmarkOptions::default()).unwrap();
        assert_eq!((m.n, m.l(), m.q(), m.m), (3, 9, 1, 1));
        assert_eq!(r.initial_box.lo(), &[0.0, -1.5, -1.5]);
        assert_eq!(r.unsafe_boxes.len(), 2);
        let (m, _) = benchmark("chen", &BenchmarkOptions::default()).unwrap();
        assert_eq!(m.l(), 6);
        let (m, _) = benchmark("spacecraft", &BenchmarkOptions::default()).unwrap();
        assert_eq!((m.l(), m.m), (7, 3));
        assert!(m.f_basis.entries().contains(&Monomial::new(vec![2, 0, 0])));
        assert!(benchmark("duffing", &BenchmarkOptions::default()).is_err());
    }

    #[test]
    fn spacecraft_matches_euler_equations() {
        let opts = BenchmarkOptions {
            noise: Some(quiet(3)),
            ..Default::default()
        };
        let (m, _) = benchmark("spacecraft", &opts).unwrap();
        let x = [0.3, -0.7, 1.1];
        let u = [2.0, -1.0, 0.5];
        let (j1, j2, j3) = (20.0, 18.0, 15.0);
        let want = [
            x[0] + 0.01 * ((j2 - j3) / j1 * x[1] * x[2] + u[0] / j1),
            x[1] + 0.01 * ((j3 - j1) / j2 * x[0] * x[2] + u[1] / j2),
            x[2] + 0.01 * ((j1 - j2) / j3 * x[0] * x[1] + u[2] / j3),
        ];
        let got = step(&m, &x, &u, &[0.0; 3]).unwrap();
        for i in 0..3 {
            assert!((got[i] - want[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn chen_matches_printed_dynamics() {
        let opts = BenchmarkOptions {
            noise: Some(quiet(3)),
            ..Default::default()
        };
        let (m, _) = benchmark("chen", &opts).unwrap();
        let x = [0.3, -0.7, 1.1];
        let u = 2.5;
        let want = [
            x[0] + 0.01 * (35.0 * x[1] - 35.0 * x[0]),
            x[1] + 0.01 * (-7.0 * x[0] + 28.0 * x[1] - x[0] * x[2] + u),
            x[2] + 0.01 * (x[0] * x[1] - 3.0 * x[2]),
        ];
        let got = step(&m, &x, &[u], &[0.0; 3]).unwrap();
        for i in 0..3 {
            assert!((got[i] - want[i]).abs() < 1e-15);
        }
    }
}
