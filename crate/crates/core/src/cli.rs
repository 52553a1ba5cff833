//! Command implementations behind the `scbc` binary: collect, certify,
//! verify and report.
//!
//! Exit codes: 0 ok, 2 config, 3 simulation, 4 no certificate found,
//! 5 verification failed, 1 any other I/O failure.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::collect::{excitation_inputs, excitation_rank, lift, load_batch, run_experiment, save_batch, CollectError, TrajectoryBatch};
use crate::config::{ModeKind, Resolved};
use crate::conformity::{confidence_beta2bar, dc_blocks, dc_blocks_robust, ConfidenceSetup, ConformityBlock};
use crate::noise::SeedStream;
use crate::polyalg::{factorize_dictionary, MonomialBasis, PolyMatrix};
use crate::region::RegionSpec;
use crate::sdpsolve::SolverOptions;
use crate::soscompile::CompileOptions;
use crate::synth::{synthesize, Attempt, Certificate, GuaranteeInputs, GuaranteeMode, SynthRequest};
use crate::system::simulate_closed;
use crate::verify::{verify_certificate, VerificationReport, VerifyError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("simulation: {0}")]
    Simulation(String),
    #[error("no certificate: every grid point failed ({0})")]
    Infeasible(String),
    #[error("verification failed")]
    Verification(Box<VerificationReport>),
    #[error("io: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Simulation(_) => 3,
            CliError::Infeasible(_) => 4,
            CliError::Verification(_) => 5,
            CliError::Io(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<crate::config::ConfigError> for CliError {
    fn from(e: crate::config::ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<CollectError> for CliError {
    fn from(e: CollectError) -> Self {
        match e {
            CollectError::Simulation { .. } => CliError::Simulation(e.to_string()),
            CollectError::Io(io) => CliError::Io(io.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("plain data serializes")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectSummary {
    pub realizations: usize,
    pub horizon: usize,
    pub per_step_rank: Vec<usize>,
    pub stacked_rank: usize,
    pub regressor_rows: usize,
    pub rank_warning: Option<String>,
    /// `None` in robust mode.
    pub beta2bar: Option<f64>,
    pub batch_hash: String,
}

/// Runs the experiment and writes the batch archive to `out`.
pub fn cmd_collect(res: &Resolved, out: &Path) -> Result<CollectSummary, CliError> {
    let inputs = excitation_inputs(&res.model.input_box, res.data_horizon, res.input_seed);
    let batch = run_experiment(&res.model, &res.x0, &inputs, res.n_samples, res.seed)?;
    save_batch(&batch, out)?;
    let lifted = lift(&batch, &res.model.f_basis, &res.model.g_poly)?;
    let rank = excitation_rank(&lifted);
    let beta2bar = match (res.mode, res.epsilon) {
        (ModeKind::Stochastic, Some(eps)) => Some(
            confidence_beta2bar(res.n_samples, eps, res.model.noise.gamma_sigma(), res.model.noise.gamma_mu())
                .map_err(|e| CliError::Config(e.to_string()))?,
        ),
        _ => None,
    };
    Ok(CollectSummary {
        realizations: batch.realizations(),
        horizon: batch.horizon(),
        per_step_rank: rank.per_step,
        stacked_rank: rank.stacked,
        regressor_rows: rank.rows,
        rank_warning: rank.warning,
        beta2bar,
        batch_hash: batch.hash(),
    })
}

/// What synthesis may see: dictionaries, declared noise bounds, regions and
/// options. The true `A`, `B` and recorded noise are not reachable from here.
#[derive(Debug, Clone)]
pub struct SynthesisView {
    pub f_basis: MonomialBasis,
    pub g_poly: PolyMatrix,
    pub gamma_mu: DMatrix<f64>,
    pub gamma_sigma: DMatrix<f64>,
    pub regions: RegionSpec,
    pub n_samples: usize,
    pub epsilon: Option<f64>,
    pub horizon: u32,
    pub mode: ModeKind,
    pub varkappa: Option<f64>,
    pub compile: CompileOptions,
    pub kappas: Vec<f64>,
    pub rhos: Vec<f64>,
    pub solver: SolverOptions,
}

impl SynthesisView {
    pub fn new(res: &Resolved, kappas: Vec<f64>, rhos: Vec<f64>, solver: SolverOptions) -> Self {
        Self {
            f_basis: res.model.f_basis.clone(),
            g_poly: res.model.g_poly.clone(),
            gamma_mu: res.model.noise.gamma_mu().clone(),
            gamma_sigma: res.model.noise.gamma_sigma().clone(),
            regions: res.regions.clone(),
            n_samples: res.n_samples,
            epsilon: res.epsilon,
            horizon: res.horizon,
            mode: res.mode,
            varkappa: res.varkappa,
            compile: res.compile.clone(),
            kappas,
            rhos,
            solver,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifyReport {
    pub mode: GuaranteeMode,
    pub beta2bar: f64,
    pub attempts: Vec<Attempt>,
    pub certificate: Option<Certificate>,
    pub guarantee: Option<String>,
}

/// Conformity blocks for the configured mode and the per-step confidence
/// complement (zero in robust mode).
pub fn conformity_blocks(view: &SynthesisView, batch: &TrajectoryBatch) -> Result<(Vec<ConformityBlock>, f64), CliError> {
    let lifted = lift(batch, &view.f_basis, &view.g_poly)?;
    match view.mode {
        ModeKind::Stochastic => {
            let eps = view.epsilon.ok_or_else(|| CliError::Config("stochastic mode needs epsilon".into()))?;
            let setup = ConfidenceSetup::new(eps, batch.realizations(), view.gamma_mu.clone(), view.gamma_sigma.clone())
                .map_err(|e| CliError::Config(e.to_string()))?;
            let blocks = dc_blocks(&lifted, &batch.xplus, &setup).map_err(|e| CliError::Config(e.to_string()))?;
            Ok((blocks, setup.beta2bar))
        }
        ModeKind::Robust => {
            let vk = view.varkappa.ok_or_else(|| CliError::Config("robust mode needs varkappa".into()))?;
            let blocks = dc_blocks_robust(&lifted, &batch.xplus, vk).map_err(|e| CliError::Config(e.to_string()))?;
            Ok((blocks, 0.0))
        }
    }
}

/// Conformity, compilation, solving and recovery over the `(kappa, rho)`
/// grid. Writes `certificate.json` (when found), `certify_report.json` and
/// `certify_report.txt` under `out`.
pub fn cmd_certify(view: &SynthesisView, batch: &TrajectoryBatch, out: &Path) -> Result<CertifyReport, CliError> {
    if batch.n() != view.regions.dim() {
        return Err(CliError::Config(format!(
            "batch has n = {}, configuration has n = {}",
            batch.n(),
            view.regions.dim()
        )));
    }
    if batch.realizations() != view.n_samples {
        return Err(CliError::Config(format!(
            "batch has N = {}, configuration expects {}",
            batch.realizations(),
            view.n_samples
        )));
    }
    let (blocks, beta2bar) = conformity_blocks(view, batch)?;
    let jac = factorize_dictionary(&view.f_basis).map_err(|e| CliError::Config(e.to_string()))?;
    let (mode, gamma_mu, gamma_sigma) = match view.mode {
        ModeKind::Stochastic => (GuaranteeMode::Stochastic, view.gamma_mu.clone(), view.gamma_sigma.clone()),
        ModeKind::Robust => {
            let n = view.regions.dim();
            let vk = view.varkappa.unwrap_or(0.0);
            (GuaranteeMode::Robust, DMatrix::zeros(n, n), DMatrix::identity(n, n) * vk * vk)
        }
    };
    let req = SynthRequest {
        blocks: &blocks,
        jac: &jac,
        g: &view.g_poly,
        regions: &view.regions,
        base: view.compile.clone(),
        kappas: view.kappas.clone(),
        rhos: view.rhos.clone(),
        solver: view.solver.clone(),
        guarantee: GuaranteeInputs {
            gamma_mu,
            gamma_sigma,
            horizon: view.horizon,
            beta2bar,
            data_horizon: batch.horizon(),
            mode,
            batch_hash: batch.hash(),
        },
    };
    let outcome = synthesize(&req);
    fs::create_dir_all(out)?;
    let report = CertifyReport {
        mode,
        beta2bar,
        guarantee: outcome.best.as_ref().map(Certificate::guarantee_line),
        attempts: outcome.attempts,
        certificate: outcome.best,
    };
    fs::write(out.join("certify_report.json"), json(&report))?;
    fs::write(out.join("certify_report.txt"), render_certify(&report))?;
    match &report.certificate {
        Some(c) => {
            c.save(&out.join("certificate.json")).map_err(|e| CliError::Io(e.to_string()))?;
            Ok(report)
        }
        None => {
            let statuses: Vec<String> = report.attempts.iter().map(|a| format!("k={} r={}: {}", a.kappa, a.rho, a.status)).collect();
            Err(CliError::Infeasible(statuses.join("; ")))
        }
    }
}

pub fn render_certify(r: &CertifyReport) -> String {
    let mut s = format!("mode: {:?}\nper-step confidence complement: {:.6e}\n", r.mode, r.beta2bar);
    for a in &r.attempts {
        s.push_str(&format!(
            "kappa {:<6} rho {:<6} {:<16} iterations {:<4} beta1 {}\n",
            a.kappa,
            a.rho,
            a.status,
            a.iterations,
            a.beta1.map_or("-".to_string(), |b| format!("{b:.6}"))
        ));
    }
    match &r.certificate {
        Some(c) => s.push_str(&format!(
            "selected kappa {} rho {}: eta {:.6e} delta {:.6e} psi {:.6e} beta1 {:.6} ({:?}) beta2 {:.6}\n{}\n",
            c.kappa,
            c.rho,
            c.eta,
            c.delta,
            c.psi,
            c.beta1,
            c.beta1_branch,
            c.beta2,
            c.guarantee_line()
        )),
        None => s.push_str("verdict: infeasible, no certificate\n"),
    }
    s
}

/// Loads and checks a certificate against the configuration's dimensions.
pub fn load_certificate(path: &Path, res: &Resolved) -> Result<Certificate, CliError> {
    let cert = Certificate::load(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if cert.n != res.model.n || cert.m != res.model.m {
        return Err(CliError::Config(format!(
            "certificate is for n = {}, m = {}; model has n = {}, m = {}",
            cert.n, cert.m, res.model.n, res.model.m
        )));
    }
    Ok(cert)
}

/// Checks a certificate against the true model; writes
/// `verification.json` under `out`.
pub fn cmd_verify(res: &Resolved, cert: &Certificate, grid: usize, runs: usize, seed: u64, out: &Path) -> Result<VerificationReport, CliError> {
    let report = verify_certificate(&res.model, cert, &res.regions, grid, Some((runs, seed))).map_err(|e| match e {
        VerifyError::TooFewRuns { .. } | VerifyError::Dimension { .. } => CliError::Config(e.to_string()),
        VerifyError::System(_) => CliError::Simulation(e.to_string()),
    })?;
    fs::create_dir_all(out)?;
    fs::write(out.join("verification.json"), json(&report))?;
    if report.pass {
        Ok(report)
    } else {
        Err(CliError::Verification(Box::new(report)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleEntry {
    pub file: String,
    pub element: String,
    pub sha256: String,
}

fn sha(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn header(n: usize, lead: &[&str]) -> String {
    lead.iter().map(|s| s.to_string()).chain((1..=n).map(|i| format!("x{i}"))).collect::<Vec<_>>().join(",") + "\n"
}

fn fmt_row(lead: &[String], x: &[f64]) -> String {
    lead.iter().cloned().chain(x.iter().map(|v| format!("{v:?}"))).collect::<Vec<_>>().join(",") + "\n"
}

/// Points of `{x : x^T P x = c}`: a parametric sweep of the unit sphere
/// mapped through `P^{-1/2}`. Dimensions above 3 use great circles in every
/// coordinate plane.
pub fn level_surface(p: &DMatrix<f64>, c: f64, resolution: usize) -> Vec<Vec<f64>> {
    let n = p.nrows();
    let eig = nalgebra::SymmetricEigen::new((p + p.transpose()) * 0.5);
    let inv_sqrt = &eig.eigenvectors
        * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.max(f64::MIN_POSITIVE).sqrt()))
        * eig.eigenvectors.transpose();
    let r = c.max(0.0).sqrt();
    let k = resolution.max(4);
    let tau = std::f64::consts::TAU;
    let mut dirs: Vec<DVector<f64>> = Vec::new();
    match n {
        1 => dirs.extend([DVector::from_element(1, -1.0), DVector::from_element(1, 1.0)]),
        2 => dirs.extend((0..k).map(|i| {
            let t = tau * i as f64 / k as f64;
            DVector::from_vec(vec![t.cos(), t.sin()])
        })),
        3 => {
            for i in 0..=k / 2 {
                let th = std::f64::consts::PI * i as f64 / (k / 2) as f64;
                for j in 0..k {
                    let ph = tau * j as f64 / k as f64;
                    dirs.push(DVector::from_vec(vec![th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos()]));
                }
            }
        }
        _ => {
            for a in 0..n {
                for b in a + 1..n {
                    for i in 0..k {
                        let t = tau * i as f64 / k as f64;
                        let mut v = DVector::zeros(n);
                        v[a] = t.cos();
                        v[b] = t.sin();
                        dirs.push(v);
                    }
                }
            }
        }
    }
    dirs.into_iter().map(|d| (&inv_sqrt * d * r).iter().copied().collect()).collect()
}

/// Writes the plot-data bundle. Without a certificate only the regions
/// (and the data trajectories, if a batch is given) are emitted.
pub fn cmd_report(
    res: &Resolved,
    cert: Option<&Certificate>,
    batch: Option<&TrajectoryBatch>,
    trajectories: usize,
    seed: u64,
    out: &Path,
) -> Result<Vec<BundleEntry>, CliError> {
    fs::create_dir_all(out)?;
    let n = res.model.n;
    let mut entries = Vec::new();
    let mut emit = |file: &str, element: &str, text: String| -> Result<(), CliError> {
        fs::write(out.join(file), &text)?;
        entries.push(BundleEntry {
            file: file.to_string(),
            element: element.to_string(),
            sha256: sha(&text),
        });
        Ok(())
    };
    let mut regions = String::from("name,bound,") + &(1..=n).map(|i| format!("x{i}")).collect::<Vec<_>>().join(",") + "\n";
    let mut add_box = |name: &str, b: &crate::region::BoxSet| {
        regions.push_str(&fmt_row(&[name.to_string(), "lo".into()], b.lo()));
        regions.push_str(&fmt_row(&[name.to_string(), "hi".into()], b.hi()));
    };
    add_box("state", &res.regions.state_box);
    add_box("initial", &res.regions.initial_box);
    for (i, b) in res.regions.unsafe_boxes.iter().enumerate() {
        add_box(&format!("unsafe_{}", i + 1), b);
    }
    emit("regions.csv", "state set, initial set and unsafe boxes", regions)?;
    if let Some(b) = batch {
        let mut s = header(n, &["realization", "k"]);
        for i in 0..b.realizations() {
            s.push_str(&fmt_row(&[i.to_string(), "0".into()], b.x0.as_slice()));
            for j in 0..b.horizon() {
                s.push_str(&fmt_row(&[i.to_string(), (j + 1).to_string()], b.xplus[i].column(j).as_slice()));
            }
        }
        emit("data_trajectories.csv", "open-loop data trajectories", s)?;
    }
    if let Some(c) = cert {
        let p = c.p_matrix();
        for (file, level, element) in [("level_eta.csv", c.eta, "initial level set B(x) = eta"), ("level_delta.csv", c.delta, "unsafe level set B(x) = delta")] {
            if level.is_finite() {
                let mut s = header(n, &[]);
                for x in level_surface(&p, level, 48) {
                    s.push_str(&fmt_row(&[], &x));
                }
                emit(file, element, s)?;
            }
        }
        if trajectories > 0 {
            let ctrl = c.controller();
            let stream = SeedStream::new(seed);
            let mut s = header(n, &["run", "k"]);
            for run in 0..trajectories {
                let mut rng = stream.rng(run as u64);
                let x0: Vec<f64> = res
                    .regions
                    .initial_box
                    .lo()
                    .iter()
                    .zip(res.regions.initial_box.hi())
                    .map(|(a, b)| a + (b - a) * rng.random::<f64>())
                    .collect();
                let r = simulate_closed(&res.model, &ctrl, &x0, c.horizon as usize, &res.regions.unsafe_boxes, &mut rng, true)
                    .map_err(|e| CliError::Simulation(e.to_string()))?;
                for (k, x) in r.states.iter().enumerate() {
                    s.push_str(&fmt_row(&[run.to_string(), k.to_string()], x.as_slice()));
                }
            }
            emit("closed_loop.csv", "closed-loop trajectories under the certified controller", s)?;
        }
    }
    fs::write(out.join("manifest.json"), json(&entries))?;
    Ok(entries)
}

/// Output directory: the explicit argument, then `output.dir`, then `out`.
pub fn output_dir(arg: Option<&Path>, configured: Option<&Path>, base: &Path) -> PathBuf {
    match (arg, configured) {
        (Some(a), _) => a.to_path_buf(),
        (None, Some(c)) => base.join(c),
        (None, None) => base.join("out"),
    }
}

/// Loads a batch archive, mapping failures to the config exit code.
pub fn read_batch(dir: &Path) -> Result<TrajectoryBatch, CliError> {
    load_batch(dir).map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))
}
