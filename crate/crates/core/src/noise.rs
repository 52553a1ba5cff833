//! Additive noise models with declared moment bounds.
//!
//! A `NoiseSpec` carries a concrete distribution (used only to generate data
//! and to serve as a test oracle) together with the bounds `gamma_mu` and
//! `gamma_sigma` that synthesis is allowed to see.
//!
//! Seeding: a `SeedStream` wraps one master seed. Realization `i` draws from
//! a ChaCha20 generator seeded with the master seed and switched to stream
//! `i`, so any single trajectory can be regenerated without the others.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

const PSD_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoiseError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("{0} is not symmetric positive semidefinite")]
    NotPsd(&'static str),
    #[error("declared bound violated: {0}")]
    BoundViolated(String),
    #[error("invalid parameters: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum NoiseKind {
    /// Independent coordinates, `x_i ~ U(lo_i, hi_i)`.
    UniformBox { lo: Vec<f64>, hi: Vec<f64> },
    Gaussian { mean: DVector<f64>, cov: DMatrix<f64> },
    /// Deterministic zero of the given dimension.
    PointMass { dim: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    kind: NoiseKind,
    gamma_mu: DMatrix<f64>,
    gamma_sigma: DMatrix<f64>,
    /// Square root of the covariance, cached for sampling.
    cov_sqrt: DMatrix<f64>,
}

pub(crate) fn is_psd(m: &DMatrix<f64>, tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > tol * scale {
        return false;
    }
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.min() >= -tol * scale
}

pub(crate) fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

pub(crate) fn lambda_max(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new((m + m.transpose()) * 0.5).eigenvalues.max()
}

impl NoiseSpec {
    /// Validates the distribution and checks `mu mu^T <= gamma_mu` and
    /// `Sigma <= gamma_sigma` in the semidefinite order.
    pub fn new(
        kind: NoiseKind,
        gamma_mu: DMatrix<f64>,
        gamma_sigma: DMatrix<f64>,
    ) -> Result<Self, NoiseError> {
        let n = match &kind {
            NoiseKind::UniformBox { lo, hi } => {
                if lo.len() != hi.len() {
                    return Err(NoiseError::Dimension {
                        expected: lo.len(),
                        got: hi.len(),
                    });
                }
                if lo.iter().zip(hi).any(|(a, b)| !(a <= b) || !a.is_finite() || !b.is_finite()) {
                    return Err(NoiseError::Invalid("uniform box needs lo <= hi".into()));
                }
                lo.len()
            }
            NoiseKind::Gaussian { mean, cov } => {
                if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
                    return Err(NoiseError::Dimension {
                        expected: mean.len(),
                        got: cov.nrows(),
                    });
                }
                if !is_psd(cov, PSD_TOL) {
                    return Err(NoiseError::NotPsd("covariance"));
                }
                mean.len()
            }
            NoiseKind::PointMass { dim } => *dim,
        };
        if n == 0 {
            return Err(NoiseError::Invalid("zero-dimensional noise".into()));
        }
        for (m, name) in [(&gamma_mu, "gamma_mu"), (&gamma_sigma, "gamma_sigma")] {
            if m.nrows() != n || m.ncols() != n {
                return Err(NoiseError::Dimension {
                    expected: n,
                    got: m.nrows(),
                });
            }
            if !is_psd(m, PSD_TOL) {
                return Err(NoiseError::NotPsd(name));
            }
        }
        let mut spec = Self {
            kind,
            gamma_mu,
            gamma_sigma,
            cov_sqrt: DMatrix::zeros(n, n),
        };
        let mu = spec.mean();
        let sigma = spec.covariance();
        if !is_psd(&(&spec.gamma_mu - &mu * mu.transpose()), 1e-10) {
            return Err(NoiseError::BoundViolated("mu mu^T exceeds gamma_mu".into()));
        }
        if !is_psd(&(&spec.gamma_sigma - &sigma), 1e-10) {
            return Err(NoiseError::BoundViolated("Sigma exceeds gamma_sigma".into()));
        }
        spec.cov_sqrt = psd_sqrt(&sigma);
        Ok(spec)
    }

    /// Zero-mean gaussian with covariance equal to the declared bound.
    pub fn gaussian_at_bound(gamma_sigma: DMatrix<f64>) -> Result<Self, NoiseError> {
        let n = gamma_sigma.nrows();
        Self::new(
            NoiseKind::Gaussian {
                mean: DVector::zeros(n),
                cov: gamma_sigma.clone(),
            },
            DMatrix::zeros(n, n),
            gamma_sigma,
        )
    }

    pub fn kind(&self) -> &NoiseKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.gamma_mu.nrows()
    }

    pub fn gamma_mu(&self) -> &DMatrix<f64> {
        &self.gamma_mu
    }

    pub fn gamma_sigma(&self) -> &DMatrix<f64> {
        &self.gamma_sigma
    }

    pub fn mean(&self) -> DVector<f64> {
        match &self.kind {
            NoiseKind::UniformBox { lo, hi } => {
                DVector::from_iterator(lo.len(), lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)))
            }
            NoiseKind::Gaussian { mean, .. } => mean.clone(),
            NoiseKind::PointMass { dim } => DVector::zeros(*dim),
        }
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        match &self.kind {
            NoiseKind::UniformBox { lo, hi } => DMatrix::from_diagonal(&DVector::from_iterator(
                lo.len(),
                lo.iter().zip(hi).map(|(a, b)| (b - a).powi(2) / 12.0),
            )),
            NoiseKind::Gaussian { cov, .. } => cov.clone(),
            NoiseKind::PointMass { dim } => DMatrix::zeros(*dim, *dim),
        }
    }

    /// Right-hand side of the fourth-moment bound:
    /// `2 (Tr Gs)^2 + 2 lambda_max(Gs) Tr(Gm)`.
    pub fn fourth_moment_bound(&self) -> f64 {
        let tr = self.gamma_sigma.trace();
        2.0 * tr * tr + 2.0 * lambda_max(&self.gamma_sigma) * self.gamma_mu.trace()
    }
}

/// Master seed plus a counter scheme for per-realization generators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStream {
    master: u64,
}

impl SeedStream {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    /// Generator for realization `index`.
    pub fn rng(&self, index: u64) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.master);
        rng.set_stream(index);
        rng
    }
}

/// Draws one sample.
pub fn draw<R: Rng + ?Sized>(spec: &NoiseSpec, rng: &mut R) -> DVector<f64> {
    match &spec.kind {
        NoiseKind::UniformBox { lo, hi } => DVector::from_iterator(
            lo.len(),
            lo.iter().zip(hi).map(|(a, b)| a + (b - a) * rng.random::<f64>()),
        ),
        NoiseKind::Gaussian { mean, .. } => {
            let z = DVector::from_iterator(
                mean.len(),
                (0..mean.len()).map(|_| rng.sample::<f64, _>(StandardNormal)),
            );
            mean + &spec.cov_sqrt * z
        }
        NoiseKind::PointMass { dim } => DVector::zeros(*dim),
    }
}

/// Draws `count` i.i.d. samples.
pub fn sample<R: Rng + ?Sized>(spec: &NoiseSpec, rng: &mut R, count: usize) -> Vec<DVector<f64>> {
    (0..count).map(|_| draw(spec, rng)).collect()
}

/// `E[s s^T] = Sigma + mu mu^T`.
pub fn true_second_moment(spec: &NoiseSpec) -> DMatrix<f64> {
    let mu = spec.mean();
    spec.covariance() + &mu * mu.transpose()
}

/// `E ||s s^T - E[s s^T]||_F^2` in closed form.
///
/// With `s = mu + w`, `w` zero mean with vanishing third moments, this is
/// `E||w||^4 - ||Sigma||_F^2 + 2 ||mu||^2 Tr(Sigma) + 2 mu^T Sigma mu`.
/// For a gaussian `E||w||^4 = (Tr Sigma)^2 + 2 ||Sigma||_F^2`; for a uniform
/// box the coordinates are independent with `E w_i^4 = 9/5 sigma_i^4`.
pub fn fourth_moment_variance(spec: &NoiseSpec) -> f64 {
    let mu = spec.mean();
    let sigma = spec.covariance();
    let fro2 = sigma.norm_squared();
    let tr = sigma.trace();
    let w4 = match &spec.kind {
        NoiseKind::Gaussian { .. } => tr * tr + 2.0 * fro2,
        NoiseKind::UniformBox { .. } => {
            let v: Vec<f64> = (0..sigma.nrows()).map(|i| sigma[(i, i)]).collect();
            let mut acc = 0.0;
            for i in 0..v.len() {
                for j in 0..v.len() {
                    acc += if i == j { 1.8 * v[i] * v[i] } else { v[i] * v[j] };
                }
            }
            acc
        }
        NoiseKind::PointMass { .. } => 0.0,
    };
    let mu2 = mu.norm_squared();
    let mu_sig_mu = (mu.transpose() * &sigma * &mu)[(0, 0)];
    (w4 - fro2 + 2.0 * mu2 * tr + 2.0 * mu_sig_mu).max(0.0)
}

/// Monte Carlo estimate of `E ||s s^T - E[s s^T]||_F^2`.
pub fn fourth_moment_variance_mc<R: Rng + ?Sized>(spec: &NoiseSpec, rng: &mut R, count: usize) -> f64 {
    let m = true_second_moment(spec);
    let mut acc = 0.0;
    for _ in 0..count {
        let s = draw(spec, rng);
        acc += (&s * s.transpose() - &m).norm_squared();
    }
    acc / count as f64
}
