//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use scbc::region::BoxSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scbc::sdpsolve::{svec, ConeLayout, ConicProgram, SparseRows};

/// min x s.t. [[x, 1], [1, x]] psd. Optimum x = 1.
pub fn eigenvalue_sdp() -> ConicProgram {
    let cones = ConeLayout { free: 1, nonneg: 0, psd: vec![2] };
    let a = SparseRows::from_triplets(
        3,
        4,
        &[(0, 1, 1.0), (0, 0, -1.0), (1, 3, 1.0), (1, 0, -1.0), (2, 2, std::f64::consts::FRAC_1_SQRT_2)],
    );
    ConicProgram::new(vec![1.0, 0.0, 0.0, 0.0], a, vec![0.0, 0.0, 1.0], cones).unwrap()
}

/// X psd 2x2, Tr X = 1, X00 = 1. Forces X = diag(1, 0).
pub fn trace_sdp() -> ConicProgram {
    let cones = ConeLayout { free: 0, nonneg: 0, psd: vec![2] };
    let a = SparseRows::from_triplets(2, 3, &[(0, 0, 1.0), (0, 2, 1.0), (1, 0, 1.0)]);
    ConicProgram::new(vec![0.0; 3], a, vec![1.0, 1.0], cones).unwrap()
}

/// min Tr(diag(1, 2) X), Tr X = 1. Optimum 1.
pub fn spectraplex_sdp() -> ConicProgram {
    let cones = ConeLayout { free: 0, nonneg: 0, psd: vec![2] };
    let a = SparseRows::from_triplets(1, 3, &[(0, 0, 1.0), (0, 2, 1.0)]);
    let c = svec(&DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]));
    ConicProgram::new(c, a, vec![1.0], cones).unwrap()
}

fn random_pd(k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
    &g * g.transpose() + DMatrix::identity(k, k) * 0.5
}

/// A random SDP with a strictly feasible primal point `X0` and dual pair
/// `(y0, S0)`. Returns the program and the bracket `b^T y0 <= opt <= c^T X0`.
pub fn random_interior_sdp(seed: u64, blocks: &[usize], rows: usize) -> (ConicProgram, f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cones = ConeLayout { free: 0, nonneg: 2, psd: blocks.to_vec() };
    let dim = cones.dim();
    let mut x0 = vec![rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)];
    let mut s0 = vec![rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)];
    for &k in blocks {
        x0.extend(svec(&random_pd(k, &mut rng)));
        s0.extend(svec(&random_pd(k, &mut rng)));
    }
    let mut trips = Vec::new();
    for r in 0..rows {
        for c in 0..dim {
            trips.push((r, c, rng.random_range(-1.0..1.0)));
        }
    }
    let a = SparseRows::from_triplets(rows, dim, &trips);
    let b = a.mul(&x0);
    let y0: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
    let aty = a.tmul(&y0);
    let c: Vec<f64> = aty.iter().zip(&s0).map(|(p, q)| p + q).collect();
    let upper = c.iter().zip(&x0).map(|(p, q)| p * q).sum();
    let lower = b.iter().zip(&y0).map(|(p, q)| p * q).sum();
    (ConicProgram::new(c, a, b, cones).unwrap(), lower, upper)
}

/// Writes the 1-D toy `x+ = 0.5 x + u + w` configuration into `dir`.
pub fn write_toy(dir: &Path, mode: &str) -> std::path::PathBuf {
    std::fs::write(dir.join("dict.txt"), "1\n").unwrap();
    let mode_section = match mode {
        "robust" => "[mode]\nkind = \"robust\"\nvarkappa = 0.1\n",
        _ => "[mode]\nkind = \"stochastic\"\n",
    };
    let text = format!(
        r#"[system]
n = 1
m = 1
a = [0.5]
b = [1.0]
dictionary = "dict.txt"

[noise]
kind = "uniform"
lo = [-0.1]
hi = [0.1]
gamma_sigma = [0.01]

[regions]
state = {{ lo = [-10.0], hi = [10.0] }}
initial = {{ lo = [-1.0], hi = [1.0] }}
unsafe_boxes = [{{ lo = [6.0], hi = [10.0] }}]

[experiment]
n_samples = 50
horizon = 4
seed = 9

[synthesis]
kappas = [0.9]
rhos = [0.5, 1.0]
epsilon = 0.05

{mode_section}
[verify]
runs = 2000
"#
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

pub fn quad(p: &DMatrix<f64>, x: &[f64]) -> f64 {
    let v = DVector::from_column_slice(x);
    (v.transpose() * p * &v)[(0, 0)]
}

/// Minimum of `x^T P x` over a box by grid search followed by projected
/// gradient descent with exact line search from the best grid points.
pub fn grid_min(p: &DMatrix<f64>, b: &BoxSet) -> f64 {
    let mut pts = b.grid(if b.dim() == 2 { 101 } else { 25 });
    pts.sort_by(|u, v| quad(p, u).total_cmp(&quad(p, v)));
    let clamp = |x: &mut Vec<f64>| {
        for (i, v) in x.iter_mut().enumerate() {
            *v = v.clamp(b.lo()[i], b.hi()[i]);
        }
    };
    let mut best = f64::INFINITY;
    for start in pts.into_iter().take(4) {
        let mut x = start;
        for _ in 0..20_000 {
            let g: Vec<f64> = (p * DVector::from_column_slice(&x) * 2.0).iter().copied().collect();
            // Projected steepest-descent direction.
            let d: Vec<f64> = (0..x.len())
                .map(|i| {
                    let gi = -g[i];
                    if (x[i] <= b.lo()[i] && gi < 0.0) || (x[i] >= b.hi()[i] && gi > 0.0) {
                        0.0
                    } else {
                        gi
                    }
                })
                .collect();
            let dv = DVector::from_column_slice(&d);
            let curv = (dv.transpose() * p * &dv)[(0, 0)];
            let slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
            if slope.abs() < 1e-20 || curv <= 0.0 {
                break;
            }
            let t = -slope / (2.0 * curv);
            let before = quad(p, &x);
            for i in 0..x.len() {
                x[i] += t * d[i];
            }
            clamp(&mut x);
            if before - quad(p, &x) < 1e-16 * before.abs().max(1e-300) {
                break;
            }
        }
        best = best.min(quad(p, &x));
    }
    best
}

pub fn random_level_instance(seed: u64, n: usize) -> (DMatrix<f64>, BoxSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let p = &g * g.transpose() + DMatrix::identity(n, n) * 0.05;
    let lo: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..3.0)).collect();
    let hi: Vec<f64> = lo.iter().map(|l| l + rng.random_range(0.2..3.0)).collect();
    (p, BoxSet::new(lo, hi).unwrap())
}

