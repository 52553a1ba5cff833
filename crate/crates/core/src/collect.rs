//! The multi-realization experiment: `N` noisy trajectories of length `T`
//! from one initial state under one shared input sequence, and their lifted
//! regressors `H = [F(x); G(x) u]`.
//!
//! Recorded noise is oracle data. It is reachable only through
//! [`TrajectoryBatch::oracle_noise`], which counts every access so tests can
//! assert the synthesis path never touches it.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector, SVD};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::noise::SeedStream;
use crate::polyalg::{eval_basis, MonomialBasis, PolyError, PolyMatrix};
use crate::region::BoxSet;
use crate::system::{simulate_open, SystemError, SystemModel};

/// Stream index reserved for the excitation inputs.
pub const INPUT_STREAM: u64 = 1 << 63;

#[derive(Debug, Error)]
pub enum CollectError {
    #[error("experiment needs N >= 1 and T >= 1 (got N = {n}, T = {t})")]
    Empty { n: usize, t: usize },
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("realization {index}: {source}")]
    Simulation { index: usize, source: SystemError },
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error("archive: {0}")]
    Archive(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug)]
pub struct TrajectoryBatch {
    pub x0: DVector<f64>,
    /// Shared inputs, `m x T`.
    pub inputs: DMatrix<f64>,
    /// Successor states, one `n x T` matrix per realization.
    pub xplus: Vec<DMatrix<f64>>,
    /// Predecessor states, one `n x T` matrix per realization.
    pub xpast: Vec<DMatrix<f64>>,
    pub seed: u64,
    noise: Vec<DMatrix<f64>>,
    oracle_reads: AtomicUsize,
}

impl Clone for TrajectoryBatch {
    fn clone(&self) -> Self {
        Self {
            x0: self.x0.clone(),
            inputs: self.inputs.clone(),
            xplus: self.xplus.clone(),
            xpast: self.xpast.clone(),
            seed: self.seed,
            noise: self.noise.clone(),
            oracle_reads: AtomicUsize::new(0),
        }
    }
}

impl PartialEq for TrajectoryBatch {
    fn eq(&self, other: &Self) -> bool {
        self.x0 == other.x0
            && self.inputs == other.inputs
            && self.xplus == other.xplus
            && self.xpast == other.xpast
            && self.seed == other.seed
            && self.noise == other.noise
    }
}

impl TrajectoryBatch {
    pub fn realizations(&self) -> usize {
        self.xplus.len()
    }

    pub fn horizon(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn n(&self) -> usize {
        self.x0.len()
    }

    /// Recorded noise, one `n x T` matrix per realization. Oracle use only.
    pub fn oracle_noise(&self) -> &[DMatrix<f64>] {
        self.oracle_reads.fetch_add(1, Ordering::Relaxed);
        &self.noise
    }

    /// How many times the recorded noise has been read.
    pub fn oracle_reads(&self) -> usize {
        self.oracle_reads.load(Ordering::Relaxed)
    }

    /// SHA-256 over the bit patterns of every stored value.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for m in std::iter::once(&DMatrix::from_column_slice(self.x0.len(), 1, self.x0.as_slice()))
            .chain(std::iter::once(&self.inputs))
            .chain(&self.xplus)
            .chain(&self.xpast)
            .chain(&self.noise)
        {
            h.update((m.nrows() as u64).to_le_bytes());
            h.update((m.ncols() as u64).to_le_bytes());
            for v in m.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// I.i.d. uniform inputs over `input_box`, `T` columns, from the dedicated
/// input stream of `seed`.
pub fn excitation_inputs(input_box: &BoxSet, horizon: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = SeedStream::new(seed).rng(INPUT_STREAM);
    let m = input_box.dim();
    let mut u = DMatrix::zeros(m, horizon);
    for j in 0..horizon {
        for i in 0..m {
            let (a, b) = (input_box.lo()[i], input_box.hi()[i]);
            u[(i, j)] = a + (b - a) * rng.random::<f64>();
        }
    }
    u
}

/// Runs `n_real` realizations; realization `i` draws noise from stream `i`.
pub fn run_experiment(
    model: &SystemModel,
    x0: &[f64],
    inputs: &DMatrix<f64>,
    n_real: usize,
    seed: u64,
) -> Result<TrajectoryBatch, CollectError> {
    let t = inputs.ncols();
    if n_real == 0 || t == 0 {
        return Err(CollectError::Empty { n: n_real, t });
    }
    if x0.len() != model.n {
        return Err(CollectError::Dimension {
            what: "x0",
            expected: model.n,
            got: x0.len(),
        });
    }
    if inputs.nrows() != model.m {
        return Err(CollectError::Dimension {
            what: "input rows",
            expected: model.m,
            got: inputs.nrows(),
        });
    }
    let stream = SeedStream::new(seed);
    let n = model.n;
    let mut xplus = Vec::with_capacity(n_real);
    let mut xpast = Vec::with_capacity(n_real);
    let mut noise = Vec::with_capacity(n_real);
    for i in 0..n_real {
        let run = simulate_open(model, x0, inputs, &mut stream.rng(i as u64))
            .map_err(|source| CollectError::Simulation { index: i, source })?;
        let mut xp = DMatrix::zeros(n, t);
        let mut xm = DMatrix::zeros(n, t);
        let mut z = DMatrix::zeros(n, t);
        for j in 0..t {
            xm.set_column(j, &run.states[j]);
            xp.set_column(j, &run.states[j + 1]);
            z.set_column(j, &run.noise[j]);
        }
        xplus.push(xp);
        xpast.push(xm);
        noise.push(z);
    }
    Ok(TrajectoryBatch {
        x0: DVector::from_column_slice(x0),
        inputs: inputs.clone(),
        xplus,
        xpast,
        seed,
        noise,
        oracle_reads: AtomicUsize::new(0),
    })
}

/// Lifted regressors per realization.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedData {
    /// `l x T` dictionary values at the predecessor states.
    pub f: Vec<DMatrix<f64>>,
    /// `q x T` columns `G(x(j)) u(j)`.
    pub g: Vec<DMatrix<f64>>,
    /// `(l + q) x T`, `[F; G]`.
    pub h: Vec<DMatrix<f64>>,
}

impl LiftedData {
    pub fn realizations(&self) -> usize {
        self.h.len()
    }

    pub fn horizon(&self) -> usize {
        self.h.first().map_or(0, |h| h.ncols())
    }

    pub fn rows(&self) -> usize {
        self.h.first().map_or(0, |h| h.nrows())
    }
}

/// Evaluates the dictionaries along the recorded predecessor states.
pub fn lift(batch: &TrajectoryBatch, f_basis: &MonomialBasis, g_poly: &PolyMatrix) -> Result<LiftedData, CollectError> {
    let n = batch.n();
    if f_basis.nvars() != n || g_poly.nvars() != n {
        return Err(CollectError::Dimension {
            what: "dictionary variables",
            expected: n,
            got: f_basis.nvars(),
        });
    }
    if g_poly.cols() != batch.inputs.nrows() {
        return Err(CollectError::Dimension {
            what: "G columns",
            expected: batch.inputs.nrows(),
            got: g_poly.cols(),
        });
    }
    let (l, q, t) = (f_basis.len(), g_poly.rows(), batch.horizon());
    let mut out = LiftedData {
        f: Vec::new(),
        g: Vec::new(),
        h: Vec::new(),
    };
    for xm in &batch.xpast {
        let mut f = DMatrix::zeros(l, t);
        let mut g = DMatrix::zeros(q, t);
        for j in 0..t {
            let x: Vec<f64> = xm.column(j).iter().copied().collect();
            f.set_column(j, &eval_basis(f_basis, &x)?);
            g.set_column(j, &(g_poly.eval(&x)? * batch.inputs.column(j)));
        }
        let mut h = DMatrix::zeros(l + q, t);
        h.view_mut((0, 0), (l, t)).copy_from(&f);
        h.view_mut((l, 0), (q, t)).copy_from(&g);
        out.f.push(f);
        out.g.push(g);
        out.h.push(h);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcitationReport {
    /// Rank of `(1/N) sum_i H_j^i H_j^iT` for each time index.
    pub per_step: Vec<usize>,
    /// Rank of all `H^i` blocks side by side.
    pub stacked: usize,
    pub rows: usize,
    pub warning: Option<String>,
}

pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = SVD::new(m.clone(), false, false).singular_values;
    let top = sv.max();
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * top).count()
}

pub fn excitation_rank(lifted: &LiftedData) -> ExcitationReport {
    let rows = lifted.rows();
    let t = lifted.horizon();
    let n_real = lifted.realizations().max(1) as f64;
    let per_step = (0..t)
        .map(|j| {
            let mut acc = DMatrix::zeros(rows, rows);
            for h in &lifted.h {
                let c = h.column(j);
                acc += &c * c.transpose();
            }
            numerical_rank(&(acc / n_real), 1e-8)
        })
        .collect();
    let mut stacked_m = DMatrix::zeros(rows, t * lifted.realizations());
    for (i, h) in lifted.h.iter().enumerate() {
        stacked_m.view_mut((0, i * t), (rows, t)).copy_from(h);
    }
    let stacked = numerical_rank(&stacked_m, 1e-8);
    let warning = (stacked < rows).then(|| format!("stacked regressor rank {stacked} < {rows}: data not persistently exciting"));
    ExcitationReport {
        per_step,
        stacked,
        rows,
        warning,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    realizations: usize,
    horizon: usize,
    n: usize,
    m: usize,
    seed: u64,
    x0: Vec<f64>,
    hash: String,
}

fn write_matrix_csv(m: &DMatrix<f64>) -> String {
    let mut s = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:?}", m[(i, j)])).collect();
        let _ = writeln!(s, "{}", row.join(","));
    }
    s
}

fn parse_rows(text: &str, skip_header: bool) -> Result<Vec<Vec<f64>>, CollectError> {
    text.lines()
        .skip(usize::from(skip_header))
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|e| CollectError::Archive(e.to_string())))
                .collect()
        })
        .collect()
}

/// Writes `manifest.json`, `inputs.csv` and one CSV per realization with
/// columns `j, xpast_1..n, xplus_1..n, noise_1..n`.
pub fn save_batch(batch: &TrajectoryBatch, dir: &Path) -> Result<(), CollectError> {
    fs::create_dir_all(dir)?;
    let n = batch.n();
    let manifest = Manifest {
        realizations: batch.realizations(),
        horizon: batch.horizon(),
        n,
        m: batch.inputs.nrows(),
        seed: batch.seed,
        x0: batch.x0.iter().copied().collect(),
        hash: batch.hash(),
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(|e| CollectError::Archive(e.to_string()))?,
    )?;
    fs::write(dir.join("inputs.csv"), write_matrix_csv(&batch.inputs))?;
    let header: Vec<String> = std::iter::once("j".to_string())
        .chain((1..=n).map(|i| format!("xpast_{i}")))
        .chain((1..=n).map(|i| format!("xplus_{i}")))
        .chain((1..=n).map(|i| format!("noise_{i}")))
        .collect();
    for i in 0..batch.realizations() {
        let mut s = header.join(",") + "\n";
        for j in 0..batch.horizon() {
            let mut row = vec![j.to_string()];
            for src in [&batch.xpast[i], &batch.xplus[i], &batch.noise[i]] {
                row.extend(src.column(j).iter().map(|v| format!("{v:?}")));
            }
            s.push_str(&row.join(","));
            s.push('\n');
        }
        fs::write(dir.join(format!("realization_{i:05}.csv")), s)?;
    }
    Ok(())
}

pub fn load_batch(dir: &Path) -> Result<TrajectoryBatch, CollectError> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)
        .map_err(|e| CollectError::Archive(e.to_string()))?;
    let (n, m, t) = (manifest.n, manifest.m, manifest.horizon);
    let urows = parse_rows(&fs::read_to_string(dir.join("inputs.csv"))?, false)?;
    if urows.len() != m || urows.iter().any(|r| r.len() != t) {
        return Err(CollectError::Archive("inputs.csv has the wrong shape".into()));
    }
    let inputs = DMatrix::from_fn(m, t, |i, j| urows[i][j]);
    let mut batch = TrajectoryBatch {
        x0: DVector::from_vec(manifest.x0.clone()),
        inputs,
        xplus: Vec::new(),
        xpast: Vec::new(),
        seed: manifest.seed,
        noise: Vec::new(),
        oracle_reads: AtomicUsize::new(0),
    };
    for i in 0..manifest.realizations {
        let rows = parse_rows(&fs::read_to_string(dir.join(format!("realization_{i:05}.csv")))?, true)?;
        if rows.len() != t || rows.iter().any(|r| r.len() != 1 + 3 * n) {
            return Err(CollectError::Archive(format!("realization {i} has the wrong shape")));
        }
        let block = |off: usize| DMatrix::from_fn(n, t, |a, j| rows[j][1 + off + a]);
        batch.xpast.push(block(0));
        batch.xplus.push(block(n));
        batch.noise.push(block(2 * n));
    }
    if batch.hash() != manifest.hash {
        return Err(CollectError::Archive("content hash does not match manifest".into()));
    }
    Ok(batch)
}
