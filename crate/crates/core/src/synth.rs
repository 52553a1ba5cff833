//! Certificate recovery, level sets and the nested safety guarantee.
//!
//! From a solved program: `P = Pb^-1`, `K(x) = Kb(x) P`, `eta` as the
//! largest vertex value of `x^T P x` on the initial box, `delta` as the exact
//! minimum over the unsafe boxes, the martingale offset `psi`, and the
//! bounds `beta1` (safety) and `beta2` (data confidence).

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformity::ConformityBlock;
use crate::polyalg::{Monomial, Poly, PolyMatrix};
use crate::region::{BoxSet, RegionSpec};
use crate::sdpsolve::{solve, ConicSolution, SolveStatus, SolverOptions};
use crate::soscompile::{assemble_program, CompileOptions, SdpProblem, SosError};
use crate::system::Controller;

/// Largest accepted condition number of `Pb`.
pub const CONDITION_CAP: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("argument out of range: {0}")]
    Range(String),
    #[error("solver status {0:?}, no certificate")]
    NotOptimal(SolveStatus),
    #[error("Pb is singular or ill-conditioned (condition {0:e})")]
    Singular(f64),
    #[error("levels violated: eta = {eta:e} is not below delta = {delta:e}")]
    LevelsViolated { eta: f64, delta: f64 },
    #[error("empty box")]
    EmptyBox,
    #[error("infinite-horizon bound needs psi = 0, got {0:e}")]
    NonzeroPsi(f64),
    #[error("certificate invalid: {0}")]
    Invalid(String),
    #[error(transparent)]
    Compile(#[from] SosError),
    #[error("io: {0}")]
    Io(String),
}

/// `max_v v^T P v` over the corners of `b`.
pub fn level_eta(p: &DMatrix<f64>, b: &BoxSet) -> Result<f64, SynthError> {
    if b.dim() != p.nrows() {
        return Err(SynthError::Range(format!("box dimension {} vs P order {}", b.dim(), p.nrows())));
    }
    Ok(b.vertices().iter().map(|v| quad(p, v)).fold(f64::NEG_INFINITY, f64::max))
}

fn quad(p: &DMatrix<f64>, x: &[f64]) -> f64 {
    let n = x.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += x[i] * p[(i, j)] * x[j];
        }
    }
    s
}

/// Exact `min x^T P x` over one box by enumerating the `3^n` patterns of
/// coordinates fixed at a bound or left free.
pub fn box_min(p: &DMatrix<f64>, b: &BoxSet) -> f64 {
    let n = b.dim();
    let (lo, hi) = (b.lo(), b.hi());
    let mut best = f64::INFINITY;
    let total = 3usize.pow(n as u32);
    for code in 0..total {
        let mut c = code;
        let mut x = vec![0.0; n];
        let mut free = Vec::new();
        let mut fixed = Vec::new();
        for i in 0..n {
            match c % 3 {
                0 => {
                    x[i] = lo[i];
                    fixed.push(i);
                }
                1 => {
                    x[i] = hi[i];
                    fixed.push(i);
                }
                _ => free.push(i),
            }
            c /= 3;
        }
        if !free.is_empty() {
            // Stationary point on the face: P_FF x_F = -P_FB x_B.
            let k = free.len();
            let pff = DMatrix::from_fn(k, k, |a, c| p[(free[a], free[c])]);
            let rhs = nalgebra::DVector::from_fn(k, |a, _| -fixed.iter().map(|&j| p[(free[a], j)] * x[j]).sum::<f64>());
            let Some(sol) = pff.cholesky().map(|ch| ch.solve(&rhs)) else {
                continue;
            };
            let mut inside = true;
            for (a, &i) in free.iter().enumerate() {
                let v = sol[a];
                let tol = 1e-12 * (1.0 + lo[i].abs().max(hi[i].abs()));
                if v < lo[i] - tol || v > hi[i] + tol {
                    inside = false;
                    break;
                }
                x[i] = v.clamp(lo[i], hi[i]);
            }
            if !inside {
                continue;
            }
        }
        best = best.min(quad(p, &x));
    }
    best
}

/// `min x^T P x` over the union of boxes; `+inf` for an empty union.
pub fn level_delta(p: &DMatrix<f64>, boxes: &[BoxSet]) -> Result<f64, SynthError> {
    if boxes.iter().any(|b| b.dim() != p.nrows()) {
        return Err(SynthError::Range("unsafe box dimension differs from P".into()));
    }
    Ok(boxes.iter().map(|b| box_min(p, b)).fold(f64::INFINITY, f64::min))
}

/// `(1 + 1/rho) Tr(P Gm) + Tr(P Gs)`.
pub fn psi(p: &DMatrix<f64>, gamma_mu: &DMatrix<f64>, gamma_sigma: &DMatrix<f64>, rho: f64) -> Result<f64, SynthError> {
    if !(rho > 0.0) {
        return Err(SynthError::Range(format!("rho must be positive, got {rho}")));
    }
    Ok((1.0 + 1.0 / rho) * (p * gamma_mu).trace() + (p * gamma_sigma).trace())
}

fn check_levels(eta: f64, delta: f64) -> Result<(), SynthError> {
    if !(eta > 0.0 && eta < delta) {
        return Err(SynthError::Range(format!("need 0 < eta < delta, got eta = {eta}, delta = {delta}")));
    }
    Ok(())
}

/// Finite-horizon bound for `kappa` in `(0, 1)`, clamped to `[0, 1]`.
pub fn beta1(eta: f64, delta: f64, psi: f64, kappa: f64, horizon: u32) -> Result<f64, SynthError> {
    check_levels(eta, delta)?;
    if !(psi >= 0.0) || !(kappa > 0.0 && kappa < 1.0) || horizon == 0 {
        return Err(SynthError::Range(format!("psi = {psi}, kappa = {kappa}, horizon = {horizon}")));
    }
    let t = horizon as i32;
    let raw = if delta >= psi / (1.0 - kappa) {
        1.0 - (1.0 - eta / delta) * (1.0 - psi / delta).powi(t)
    } else {
        (eta / delta) * kappa.powi(t) + psi / ((1.0 - kappa) * delta) * (1.0 - kappa.powi(t))
    };
    Ok(raw.clamp(0.0, 1.0))
}

/// `(eta + psi T) / delta`, clamped to `[0, 1]`.
pub fn beta1_relaxed(eta: f64, delta: f64, psi: f64, horizon: u32) -> Result<f64, SynthError> {
    check_levels(eta, delta)?;
    if !(psi >= 0.0) {
        return Err(SynthError::Range(format!("psi = {psi}")));
    }
    Ok(((eta + psi * horizon as f64) / delta).clamp(0.0, 1.0))
}

/// `eta / delta`; only valid when the offset vanishes.
pub fn beta1_infinite(eta: f64, delta: f64, psi: f64) -> Result<f64, SynthError> {
    if psi != 0.0 {
        return Err(SynthError::NonzeroPsi(psi));
    }
    check_levels(eta, delta)?;
    Ok(eta / delta)
}

/// `Pb^-1` with the condition-number cap.
pub fn invert_pbar(pbar: &DMatrix<f64>) -> Result<DMatrix<f64>, SynthError> {
    let sym = (pbar + pbar.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    let (lmin, lmax) = (eig.eigenvalues.min(), eig.eigenvalues.max());
    if !(lmin > 0.0) || lmax / lmin > CONDITION_CAP {
        let cond = if lmin > 0.0 { lmax / lmin } else { f64::INFINITY };
        return Err(SynthError::Singular(cond));
    }
    let inv = sym.cholesky().ok_or(SynthError::Singular(f64::INFINITY))?.inverse();
    Ok((&inv + inv.transpose()) * 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuaranteeMode {
    Stochastic,
    Robust,
}

/// Which formula produced the reported `beta1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Beta1Branch {
    Theorem,
    Relaxed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerTerm {
    pub exponents: Vec<u32>,
    /// `m x n` coefficient block, row-major.
    pub coeffs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverRecord {
    pub status: String,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub gap: f64,
    pub iterate_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub n: usize,
    pub m: usize,
    /// `P`, row-major.
    pub p: Vec<f64>,
    pub controller: Vec<ControllerTerm>,
    pub eta: f64,
    pub delta: f64,
    pub psi: f64,
    pub kappa: f64,
    pub rho: f64,
    pub horizon: u32,
    pub beta1: f64,
    pub beta1_branch: Beta1Branch,
    pub beta1_theorem: Option<f64>,
    pub beta1_relaxed: f64,
    pub beta1_infinite: Option<f64>,
    pub beta2: f64,
    pub beta2bar: f64,
    pub data_horizon: usize,
    pub confidence_vacuous: bool,
    pub mode: GuaranteeMode,
    pub batch_hash: String,
    pub solver: SolverRecord,
}

impl Certificate {
    pub fn p_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.n, &self.p)
    }

    /// `K(x)` as a polynomial matrix.
    pub fn gain(&self) -> PolyMatrix {
        let mut k = PolyMatrix::zeros(self.m, self.n, self.n);
        for r in 0..self.m {
            for c in 0..self.n {
                let terms = self
                    .controller
                    .iter()
                    .map(|t| (t.coeffs[r * self.n + c], Monomial::new(t.exponents.clone())));
                k.set(r, c, Poly::from_terms(terms));
            }
        }
        k
    }

    pub fn controller(&self) -> Controller {
        Controller { kgain: self.gain() }
    }

    /// Checks the invariants every emitted certificate satisfies.
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.p.len() != self.n * self.n {
            return Err(SynthError::Invalid("P has wrong size".into()));
        }
        if self.controller.iter().any(|t| t.coeffs.len() != self.m * self.n || t.exponents.len() != self.n) {
            return Err(SynthError::Invalid("controller table has wrong shape".into()));
        }
        let p = self.p_matrix();
        if (&p - p.transpose()).amax() > 1e-9 * p.amax().max(1.0) {
            return Err(SynthError::Invalid("P is not symmetric".into()));
        }
        if !(SymmetricEigen::new(p).eigenvalues.min() > 0.0) {
            return Err(SynthError::Invalid("P is not positive definite".into()));
        }
        if !(self.eta > 0.0 && self.eta < self.delta) {
            return Err(SynthError::Invalid(format!("need 0 < eta < delta, got {} and {}", self.eta, self.delta)));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2), ("beta1_relaxed", self.beta1_relaxed)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(SynthError::Invalid(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if self.psi < 0.0 {
            return Err(SynthError::Invalid("negative psi".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("certificate serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, SynthError> {
        let c: Certificate = serde_json::from_str(text).map_err(|e| SynthError::Invalid(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<(), SynthError> {
        std::fs::write(path, self.to_json()).map_err(|e| SynthError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| SynthError::Io(e.to_string()))?)
    }

    /// `P{ P{safe} >= 1 - beta1 } >= 1 - beta2`.
    pub fn guarantee_line(&self) -> String {
        if self.confidence_vacuous {
            format!("P{{safe over {} steps}} >= {:.6} (data confidence vacuous)", self.horizon, 1.0 - self.beta1)
        } else {
            format!(
                "P{{ P{{safe over {} steps}} >= {:.6} }} >= {:.6}",
                self.horizon,
                1.0 - self.beta1,
                1.0 - self.beta2
            )
        }
    }
}

/// Everything besides the solution that the guarantee needs.
#[derive(Debug, Clone, PartialEq)]
pub struct GuaranteeInputs {
    pub gamma_mu: DMatrix<f64>,
    pub gamma_sigma: DMatrix<f64>,
    pub horizon: u32,
    /// Per-step confidence complement; zero in robust mode.
    pub beta2bar: f64,
    pub data_horizon: usize,
    pub mode: GuaranteeMode,
    pub batch_hash: String,
}

pub fn recover_certificate(
    problem: &SdpProblem,
    sol: &ConicSolution,
    regions: &RegionSpec,
    g: &GuaranteeInputs,
) -> Result<Certificate, SynthError> {
    if sol.status != SolveStatus::Optimal {
        return Err(SynthError::NotOptimal(sol.status));
    }
    let ly = &problem.layout;
    let p = invert_pbar(&problem.pbar(&sol.x))?;
    let k = problem
        .kbar(&sol.x)
        .mul(&PolyMatrix::from_constant(&p, ly.n))
        .map_err(|e| SynthError::Invalid(e.to_string()))?;
    let eta = level_eta(&p, &regions.initial_box)?;
    let delta = level_delta(&p, &regions.unsafe_boxes)?;
    let psi_v = psi(&p, &g.gamma_mu, &g.gamma_sigma, ly.options.rho)?;
    if !(eta < delta) {
        return Err(SynthError::LevelsViolated { eta, delta });
    }
    let (beta1_theorem, relaxed, infinite) = if delta.is_infinite() {
        (Some(0.0), 0.0, Some(0.0))
    } else {
        let th = (ly.options.kappa < 1.0)
            .then(|| beta1(eta, delta, psi_v, ly.options.kappa, g.horizon))
            .transpose()?;
        let rl = beta1_relaxed(eta, delta, psi_v, g.horizon)?;
        let inf = (psi_v == 0.0).then(|| beta1_infinite(eta, delta, psi_v)).transpose()?;
        (th, rl, inf)
    };
    let (beta1_v, branch) = match beta1_theorem {
        Some(t) if t <= relaxed => (t, Beta1Branch::Theorem),
        _ => (relaxed, Beta1Branch::Relaxed),
    };
    let raw_beta2 = ly.blocks_t as f64 * g.beta2bar;
    // Controller table over the union of monomials appearing in K.
    let mut monos: Vec<Monomial> = Vec::new();
    for r in 0..ly.m {
        for c in 0..ly.n {
            for (_, mo) in k.get(r, c).terms() {
                if !monos.contains(mo) {
                    monos.push(mo.clone());
                }
            }
        }
    }
    monos.sort();
    let controller = monos
        .iter()
        .map(|mo| ControllerTerm {
            exponents: mo.exponents().to_vec(),
            coeffs: (0..ly.m * ly.n).map(|i| k.get(i / ly.n, i % ly.n).coeff(mo)).collect(),
        })
        .collect();
    let cert = Certificate {
        n: ly.n,
        m: ly.m,
        p: (0..ly.n * ly.n).map(|i| p[(i / ly.n, i % ly.n)]).collect(),
        controller,
        eta,
        delta,
        psi: psi_v,
        kappa: ly.options.kappa,
        rho: ly.options.rho,
        horizon: g.horizon,
        beta1: beta1_v,
        beta1_branch: branch,
        beta1_theorem,
        beta1_relaxed: relaxed,
        beta1_infinite: infinite,
        beta2: raw_beta2.clamp(0.0, 1.0),
        beta2bar: g.beta2bar,
        data_horizon: g.data_horizon,
        confidence_vacuous: g.beta2bar >= 1.0 || raw_beta2 >= 1.0,
        mode: g.mode,
        batch_hash: g.batch_hash.clone(),
        solver: SolverRecord {
            status: format!("{:?}", sol.status).to_lowercase(),
            iterations: sol.iterations,
            primal_residual: sol.pres,
            dual_residual: sol.dres,
            gap: sol.gap,
            iterate_hash: sol.iterate_hash.clone(),
        },
    };
    cert.validate()?;
    Ok(cert)
}

/// Outcome of one `(kappa, rho)` grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub kappa: f64,
    pub rho: f64,
    pub status: String,
    pub beta1: Option<f64>,
    pub error: Option<String>,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutcome {
    pub best: Option<Certificate>,
    pub attempts: Vec<Attempt>,
}

impl SynthOutcome {
    /// True when no grid point produced a feasible program.
    pub fn all_infeasible(&self) -> bool {
        self.attempts.iter().all(|a| a.status == "infeasible")
    }
}

/// Inputs of the grid search.
#[derive(Debug, Clone)]
pub struct SynthRequest<'a> {
    pub blocks: &'a [ConformityBlock],
    pub jac: &'a PolyMatrix,
    pub g: &'a PolyMatrix,
    pub regions: &'a RegionSpec,
    pub base: CompileOptions,
    pub kappas: Vec<f64>,
    pub rhos: Vec<f64>,
    pub solver: SolverOptions,
    pub guarantee: GuaranteeInputs,
}

fn run_point(req: &SynthRequest<'_>, kappa: f64, rho: f64) -> (Attempt, Option<Certificate>) {
    let mut att = Attempt {
        kappa,
        rho,
        status: String::new(),
        beta1: None,
        error: None,
        iterations: 0,
    };
    let opts = CompileOptions {
        kappa,
        rho,
        ..req.base.clone()
    };
    let problem = match assemble_program(req.blocks, req.jac, req.g, req.regions, &opts) {
        Ok(p) => p,
        Err(e) => {
            att.status = "compile-error".into();
            att.error = Some(e.to_string());
            return (att, None);
        }
    };
    let sol = match solve(&problem.program, &req.solver) {
        Ok(s) => s,
        Err(e) => {
            att.status = "solver-error".into();
            att.error = Some(e.to_string());
            return (att, None);
        }
    };
    att.iterations = sol.iterations;
    att.status = format!("{:?}", sol.status).to_lowercase();
    if sol.status != SolveStatus::Optimal {
        return (att, None);
    }
    match recover_certificate(&problem, &sol, req.regions, &req.guarantee) {
        Ok(c) => {
            att.beta1 = Some(c.beta1);
            (att, Some(c))
        }
        Err(e) => {
            att.status = match e {
                SynthError::LevelsViolated { .. } => "levels-violated".into(),
                _ => "recovery-failed".into(),
            };
            att.error = Some(e.to_string());
            (att, None)
        }
    }
}

/// Solves every `(kappa, rho)` pair and keeps the certificate with the
/// smallest `beta1` (ties go to the earlier grid point).
pub fn synthesize(req: &SynthRequest<'_>) -> SynthOutcome {
    let grid: Vec<(f64, f64)> = req.kappas.iter().flat_map(|&k| req.rhos.iter().map(move |&r| (k, r))).collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(grid.len()).max(1);
    let mut results: Vec<Option<(Attempt, Option<Certificate>)>> = vec![None; grid.len()];
    std::thread::scope(|s| {
        let chunks: Vec<Vec<usize>> = (0..workers).map(|w| (w..grid.len()).step_by(workers).collect()).collect();
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|idx| {
                let grid = &grid;
                s.spawn(move || idx.into_iter().map(|i| (i, run_point(req, grid[i].0, grid[i].1))).collect::<Vec<_>>())
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("grid worker panicked") {
                results[i] = Some(r);
            }
        }
    });
    let mut best: Option<Certificate> = None;
    let mut attempts = Vec::new();
    for (att, cert) in results.into_iter().flatten() {
        if let Some(c) = cert {
            if best.as_ref().is_none_or(|b| c.beta1 < b.beta1) {
                best = Some(c);
            }
        }
        attempts.push(att);
    }
    SynthOutcome { best, attempts }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_eta_examples() {
        let c = BoxSet::cube(3, -1.0, 1.0).unwrap();
        assert_eq!(level_eta(&DMatrix::identity(3, 3), &c).unwrap(), 3.0);
        let p = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 2.0, 3.0]));
        let b = BoxSet::new(vec![0.0, -1.5, -1.5], vec![1.5, 1.5, 1.5]).unwrap();
        assert!((level_eta(&p, &b).unwrap() - 13.5).abs() < 1e-12);
        let pt = BoxSet::new(vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]).unwrap();
        assert!((level_eta(&p, &pt).unwrap() - (1.0 + 8.0 + 27.0)).abs() < 1e-12);
    }

    #[test]
    fn level_delta_examples() {
        let boxes = vec![BoxSet::cube(3, 6.0, 10.0).unwrap(), BoxSet::cube(3, -10.0, -6.0).unwrap()];
        assert!((level_delta(&DMatrix::identity(3, 3), &boxes).unwrap() - 108.0).abs() < 1e-12);
        let p = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 2.0, 3.0]));
        assert!((level_delta(&p, &boxes[..1]).unwrap() - 216.0).abs() < 1e-12);
        assert_eq!(level_delta(&p, &[]).unwrap(), f64::INFINITY);
    }

    #[test]
    fn interior_face_minimum() {
        // Strong coupling; the box straddles x2 = 0 so the minimizer has x2 free.
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 1.5, 1.5, 2.0]);
        let b = BoxSet::new(vec![1.0, -3.0], vec![2.0, 3.0]).unwrap();
        let v = box_min(&p, &b);
        // x1 = 1, x2 = -0.75: 2 - 2.25 + 1.125 = 0.875.
        assert!((v - 0.875).abs() < 1e-12);
    }

    #[test]
    fn psi_examples() {
        let i3 = DMatrix::<f64>::identity(3, 3);
        let z = DMatrix::zeros(3, 3);
        assert!((psi(&i3, &z, &(&i3 * 0.006), 3.0).unwrap() - 0.018).abs() < 1e-15);
        assert_eq!(psi(&i3, &z, &z, 1.0).unwrap(), 0.0);
        let p = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 2.0]));
        let i2 = DMatrix::<f64>::identity(2, 2);
        assert!((psi(&p, &(&i2 * 0.1), &(&i2 * 0.2), 1.0).unwrap() - 1.2).abs() < 1e-12);
        assert!(psi(&p, &i2, &i2, 0.0).is_err());
    }

    #[test]
    fn beta1_examples() {
        for kappa in [0.1, 0.5, 0.9] {
            for t in [1, 10, 100] {
                assert!((beta1(0.1, 1.0, 0.0, kappa, t).unwrap() - 0.1).abs() < 1e-15);
            }
        }
        let v = beta1(0.1, 1.0, 0.005, 0.5, 10).unwrap();
        assert!((v - 0.144_000_9).abs() < 1e-6, "{v}");
        assert_eq!(beta1(0.001, 0.005, 0.005, 0.5, 2).unwrap(), 1.0);
        assert!(beta1(0.1, 1.0, 0.0, 1.0, 10).is_err());
    }

    #[test]
    fn relaxed_and_infinite() {
        assert!((beta1_relaxed(1.0, 10.0, 0.0, 100).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(beta1_relaxed(1.0, 10.0, 1.0, 100).unwrap(), 1.0);
        let psi_probe: f64 = (0.08 * 4.02e6 - 2.72e5) / 100.0;
        assert!((psi_probe - 496.0).abs() < 1e-9);
        assert!((beta1_infinite(1.0, 10.0, 0.0).unwrap() - 0.1).abs() < 1e-15);
        assert!(beta1_infinite(1.0 - 1e-9, 1.0, 0.0).unwrap() > 0.999_999);
        assert_eq!(beta1_infinite(1.0, 10.0, 0.1), Err(SynthError::NonzeroPsi(0.1)));
    }

    #[test]
    fn singular_pbar_rejected() {
        assert!(matches!(invert_pbar(&DMatrix::zeros(2, 2)), Err(SynthError::Singular(_))));
        let bad = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 1e-13]));
        assert!(matches!(invert_pbar(&bad), Err(SynthError::Singular(_))));
        let ok = invert_pbar(&(DMatrix::<f64>::identity(2, 2) * 2.0)).unwrap();
        assert!((ok[(0, 0)] - 0.5).abs() < 1e-15);
    }
}
