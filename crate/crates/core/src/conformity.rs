//! Confidence bounds for empirical noise moments and the data-conformity
//! blocks that constrain the unknown `Phi = [A B]`.
//!
//! For time index `j` the block is
//!
//! ```text
//! R_j = [ (1/N) sum Xi Xi^T - Gamma    -(1/N) sum Xi H^T ]
//!       [ -(1/N) sum H Xi^T             (1/N) sum H H^T   ]
//! ```
//!
//! with `Gamma = Gamma_Sigma + Gamma_mu + eps I` (stochastic) or
//! `kappa^2 I` (robust). Every `Phi` consistent with the data satisfies
//! `[I Phi] R_j [I Phi]^T <= 0`.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collect::LiftedData;
use crate::noise::lambda_max;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConformityError {
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("empty batch")]
    Empty,
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
}

fn noise_constant(gamma_sigma: &DMatrix<f64>, gamma_mu: &DMatrix<f64>) -> f64 {
    let tr = gamma_sigma.trace();
    tr * tr + lambda_max(gamma_sigma) * gamma_mu.trace()
}

/// `2 / (N eps^2) ((Tr Gs)^2 + lambda_max(Gs) Tr Gm)`, unclamped.
pub fn confidence_beta2bar(
    n_samples: usize,
    epsilon: f64,
    gamma_sigma: &DMatrix<f64>,
    gamma_mu: &DMatrix<f64>,
) -> Result<f64, ConformityError> {
    if !(epsilon > 0.0) {
        return Err(ConformityError::Invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    if n_samples == 0 {
        return Err(ConformityError::Invalid("N must be at least 1".into()));
    }
    Ok(2.0 / (n_samples as f64 * epsilon * epsilon) * noise_constant(gamma_sigma, gamma_mu))
}

/// Smallest `N >= 1` whose confidence bound does not exceed `target`.
pub fn min_samples(
    target: f64,
    epsilon: f64,
    gamma_sigma: &DMatrix<f64>,
    gamma_mu: &DMatrix<f64>,
) -> Result<usize, ConformityError> {
    if !(target > 0.0) || !(epsilon > 0.0) {
        return Err(ConformityError::Invalid("target and epsilon must be positive".into()));
    }
    let raw = 2.0 / (target * epsilon * epsilon) * noise_constant(gamma_sigma, gamma_mu);
    // Absorb rounding so that exact integers are not bumped up by one.
    let n = (raw * (1.0 - 1e-12)).ceil();
    Ok((n as usize).max(1))
}

/// The `eps` at which the confidence bound equals `target` for `N` samples.
pub fn epsilon_for_target(
    n_samples: usize,
    target: f64,
    gamma_sigma: &DMatrix<f64>,
    gamma_mu: &DMatrix<f64>,
) -> Result<f64, ConformityError> {
    if !(target > 0.0) || n_samples == 0 {
        return Err(ConformityError::Invalid("target and N must be positive".into()));
    }
    let c = noise_constant(gamma_sigma, gamma_mu);
    if c == 0.0 {
        return Err(ConformityError::Invalid(
            "noise bounds vanish; epsilon is not determined by the target".into(),
        ));
    }
    Ok((2.0 * c / (n_samples as f64 * target)).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceSetup {
    pub epsilon: f64,
    pub n_samples: usize,
    pub gamma_mu: DMatrix<f64>,
    pub gamma_sigma: DMatrix<f64>,
    pub beta2bar: f64,
}

impl ConfidenceSetup {
    pub fn new(
        epsilon: f64,
        n_samples: usize,
        gamma_mu: DMatrix<f64>,
        gamma_sigma: DMatrix<f64>,
    ) -> Result<Self, ConformityError> {
        let beta2bar = confidence_beta2bar(n_samples, epsilon, &gamma_sigma, &gamma_mu)?;
        Ok(Self {
            epsilon,
            n_samples,
            gamma_mu,
            gamma_sigma,
            beta2bar,
        })
    }

    pub fn vacuous(&self) -> bool {
        self.beta2bar >= 1.0
    }

    /// `Gamma_Sigma + Gamma_mu + eps I`.
    pub fn shift(&self) -> DMatrix<f64> {
        let n = self.gamma_sigma.nrows();
        &self.gamma_sigma + &self.gamma_mu + DMatrix::identity(n, n) * self.epsilon
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum BlockMode {
    Stochastic { epsilon: f64 },
    Robust { varkappa: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConformityBlock {
    /// Time index, starting at 1.
    pub j: usize,
    pub matrix: DMatrix<f64>,
    pub mode: BlockMode,
}

fn assemble(
    lifted: &LiftedData,
    xplus: &[DMatrix<f64>],
    shift: &DMatrix<f64>,
    mode: BlockMode,
) -> Result<Vec<ConformityBlock>, ConformityError> {
    if lifted.realizations() == 0 || xplus.is_empty() || lifted.horizon() == 0 {
        return Err(ConformityError::Empty);
    }
    if xplus.len() != lifted.realizations() {
        return Err(ConformityError::Dimension {
            what: "realizations",
            expected: lifted.realizations(),
            got: xplus.len(),
        });
    }
    let n = xplus[0].nrows();
    if shift.nrows() != n {
        return Err(ConformityError::Dimension {
            what: "noise bound",
            expected: n,
            got: shift.nrows(),
        });
    }
    let r = lifted.rows();
    let t = lifted.horizon();
    let inv_n = 1.0 / xplus.len() as f64;
    let mut out = Vec::with_capacity(t);
    for j in 0..t {
        let mut acc = DMatrix::zeros(n + r, n + r);
        for (xp, h) in xplus.iter().zip(&lifted.h) {
            if xp.ncols() != t {
                return Err(ConformityError::Dimension {
                    what: "horizon",
                    expected: t,
                    got: xp.ncols(),
                });
            }
            let mut v = nalgebra::DVector::zeros(n + r);
            v.rows_mut(0, n).copy_from(&xp.column(j));
            v.rows_mut(n, r).copy_from(&(-h.column(j)));
            acc += &v * v.transpose();
        }
        acc *= inv_n;
        let mut tl = acc.view_mut((0, 0), (n, n));
        tl -= shift;
        let matrix = (&acc + acc.transpose()) * 0.5;
        out.push(ConformityBlock {
            j: j + 1,
            matrix,
            mode: mode.clone(),
        });
    }
    Ok(out)
}

/// Stochastic blocks, one per time index.
pub fn dc_blocks(
    lifted: &LiftedData,
    xplus: &[DMatrix<f64>],
    setup: &ConfidenceSetup,
) -> Result<Vec<ConformityBlock>, ConformityError> {
    if setup.n_samples != xplus.len() {
        return Err(ConformityError::Dimension {
            what: "N",
            expected: setup.n_samples,
            got: xplus.len(),
        });
    }
    assemble(lifted, xplus, &setup.shift(), BlockMode::Stochastic { epsilon: setup.epsilon })
}

/// Robust blocks with the worst-case second moment `varkappa^2 I`.
pub fn dc_blocks_robust(
    lifted: &LiftedData,
    xplus: &[DMatrix<f64>],
    varkappa: f64,
) -> Result<Vec<ConformityBlock>, ConformityError> {
    if !(varkappa > 0.0) {
        return Err(ConformityError::Invalid(format!("varkappa must be positive, got {varkappa}")));
    }
    let n = xplus.first().map_or(0, |x| x.nrows());
    assemble(
        lifted,
        xplus,
        &(DMatrix::identity(n, n) * varkappa * varkappa),
        BlockMode::Robust { varkappa },
    )
}

/// `[I Phi] R [I Phi]^T`.
pub fn dc_quadratic_form(phi: &DMatrix<f64>, block: &DMatrix<f64>) -> Result<DMatrix<f64>, ConformityError> {
    let n = phi.nrows();
    if n + phi.ncols() != block.nrows() {
        return Err(ConformityError::Dimension {
            what: "Phi columns",
            expected: block.nrows() - n,
            got: phi.ncols(),
        });
    }
    let mut w = DMatrix::zeros(n, block.nrows());
    w.view_mut((0, 0), (n, n)).fill_with_identity();
    w.view_mut((0, n), (n, phi.ncols())).copy_from(phi);
    Ok(&w * block * w.transpose())
}

/// Whether `Phi` satisfies the block's inequality, and its largest eigenvalue.
/// The tolerance is `1e-9` times the block's largest entry (at least 1).
pub fn check_dc(phi: &DMatrix<f64>, block: &ConformityBlock) -> Result<(bool, f64), ConformityError> {
    let q = dc_quadratic_form(phi, &block.matrix)?;
    let top = SymmetricEigen::new((&q + q.transpose()) * 0.5).eigenvalues.max();
    let scale = block.matrix.amax().max(1.0);
    Ok((top <= 1e-9 * scale, top))
}

/// One CSV per block plus `manifest.json` recording the mode and bounds.
pub fn export_blocks(blocks: &[ConformityBlock], extra: serde_json::Value, dir: &Path) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for b in blocks {
        let name = format!("block_{:03}.csv", b.j);
        let mut s = String::new();
        for i in 0..b.matrix.nrows() {
            let row: Vec<String> = (0..b.matrix.ncols()).map(|k| format!("{:?}", b.matrix[(i, k)])).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        fs::write(dir.join(&name), s)?;
        files.push(name);
    }
    let manifest = serde_json::json!({
        "mode": blocks.first().map(|b| &b.mode),
        "files": files,
        "bounds": extra,
    });
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).unwrap_or_default())
}
