//! Dense primal-dual interior-point solver for linear conic programs
//!
//! ```text
//! minimize c^T x   subject to   A x = b,   x in K
//! ```
//!
//! with `K = R^f x R_+^l x S_+^{k_1} x ... x S_+^{k_p}`. Symmetric blocks are
//! stored as scaled upper triangles: entry `(i, j)` with `i < j` carries
//! `sqrt(2) X_ij`, so the Euclidean inner product of two stored blocks is the
//! trace inner product. Within a block the triangle is walked column by
//! column: `(0,0), (0,1), (1,1), (0,2), (1,2), (2,2), ...`.
//!
//! The iteration is a homogeneous self-dual embedding with Nesterov-Todd
//! scaling and a Mehrotra predictor-corrector. The search direction comes
//! from the normal equations `A W A^T`, factored by a dense Cholesky; free
//! variables are handled by a bordered Schur complement. Everything runs on
//! one thread with a fixed operation order, so identical input yields
//! bit-identical iterates.
//!
//! # Text format
//!
//! ```text
//! conic 1
//! free <f>
//! nonneg <l>
//! psd <k_1> ... <k_p>          (empty list allowed)
//! rows <m>
//! objective <nnz>              followed by nnz lines "<col> <value>"
//! rhs <nnz>                    followed by nnz lines "<row> <value>"
//! matrix <nnz>                 followed by nnz lines "<row> <col> <value>"
//! ```
//!
//! Indices are zero-based; columns follow the cone order above. Lines
//! starting with `#` are comments. Values use shortest round-trip decimal
//! form, so write-then-read is lossless.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};
use sha2::{Digest, Sha256};
use thiserror::Error;

const SQRT2: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("malformed program: {0}")]
    Malformed(String),
    #[error("non-finite value encountered at iteration {0}")]
    NonFinite(usize),
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io: {0}")]
    Io(String),
}

/// Cone dimensions in storage order: free, nonnegative, PSD blocks.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConeLayout {
    pub free: usize,
    pub nonneg: usize,
    pub psd: Vec<usize>,
}

impl ConeLayout {
    pub fn dim(&self) -> usize {
        self.free + self.nonneg + self.psd.iter().map(|k| k * (k + 1) / 2).sum::<usize>()
    }

    /// Offset of PSD block `b` in the stacked vector.
    pub fn psd_offset(&self, b: usize) -> usize {
        self.free + self.nonneg + self.psd[..b].iter().map(|k| k * (k + 1) / 2).sum::<usize>()
    }

    /// Barrier degree: orthant length plus block orders.
    pub fn degree(&self) -> usize {
        self.nonneg + self.psd.iter().sum::<usize>()
    }
}

/// Position of `(i, j)` in a stored triangle, either order.
pub fn svec_index(i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    j * (j + 1) / 2 + i
}

/// Stores a symmetric matrix as a scaled upper triangle.
pub fn svec(m: &DMatrix<f64>) -> Vec<f64> {
    let k = m.nrows();
    let mut v = Vec::with_capacity(k * (k + 1) / 2);
    for j in 0..k {
        for i in 0..=j {
            v.push(if i == j { m[(i, i)] } else { SQRT2 * 0.5 * (m[(i, j)] + m[(j, i)]) });
        }
    }
    v
}

/// Inverse of [`svec`].
pub fn smat(v: &[f64], k: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(k, k);
    let mut t = 0;
    for j in 0..k {
        for i in 0..=j {
            if i == j {
                m[(i, i)] = v[t];
            } else {
                let x = v[t] / SQRT2;
                m[(i, j)] = x;
                m[(j, i)] = x;
            }
            t += 1;
        }
    }
    m
}

/// Row-wise sparse matrix with sorted, duplicate-free rows.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseRows {
    pub ncols: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self {
            ncols,
            rows: vec![Vec::new(); nrows],
        }
    }

    /// Sums duplicates and drops explicit zeros.
    pub fn from_triplets(nrows: usize, ncols: usize, trips: &[(usize, usize, f64)]) -> Self {
        let mut s = Self::new(nrows, ncols);
        for &(r, c, v) in trips {
            s.rows[r].push((c, v));
        }
        for row in &mut s.rows {
            normalize_row(row);
        }
        s
    }

    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|r| r.iter().map(|&(c, v)| v * x[c]).sum()).collect()
    }

    pub fn tmul(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.ncols];
        for (r, row) in self.rows.iter().enumerate() {
            let yr = y[r];
            if yr != 0.0 {
                for &(c, v) in row {
                    out[c] += v * yr;
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.nrows(), self.ncols);
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, v) in row {
                d[(r, c)] = v;
            }
        }
        d
    }
}

/// Sorts by column, merges duplicates, removes zeros.
pub fn normalize_row(row: &mut Vec<(usize, f64)>) {
    row.sort_by_key(|e| e.0);
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(row.len());
    for &(c, v) in row.iter() {
        match out.last_mut() {
            Some(last) if last.0 == c => last.1 += v,
            _ => out.push((c, v)),
        }
    }
    out.retain(|e| e.1 != 0.0);
    *row = out;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConicProgram {
    pub c: Vec<f64>,
    pub a: SparseRows,
    pub b: Vec<f64>,
    pub cones: ConeLayout,
}

impl ConicProgram {
    pub fn new(c: Vec<f64>, a: SparseRows, b: Vec<f64>, cones: ConeLayout) -> Result<Self, SolveError> {
        let p = Self { c, a, b, cones };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), SolveError> {
        let n = self.cones.dim();
        if self.c.len() != n {
            return Err(SolveError::Malformed(format!("objective has {} entries, cone dimension is {n}", self.c.len())));
        }
        if self.a.ncols != n {
            return Err(SolveError::Malformed(format!("matrix has {} columns, cone dimension is {n}", self.a.ncols)));
        }
        if self.a.nrows() != self.b.len() {
            return Err(SolveError::Malformed(format!(
                "matrix has {} rows, right-hand side has {}",
                self.a.nrows(),
                self.b.len()
            )));
        }
        if self.cones.psd.iter().any(|&k| k == 0) {
            return Err(SolveError::Malformed("zero-order PSD block".into()));
        }
        for row in &self.a.rows {
            if row.iter().any(|&(c, v)| c >= n || !v.is_finite()) {
                return Err(SolveError::Malformed("matrix entry out of range or not finite".into()));
            }
        }
        if self.b.iter().chain(&self.c).any(|v| !v.is_finite()) {
            return Err(SolveError::Malformed("non-finite data".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("conic 1\n");
        let _ = writeln!(s, "free {}", self.cones.free);
        let _ = writeln!(s, "nonneg {}", self.cones.nonneg);
        let psd: Vec<String> = self.cones.psd.iter().map(|k| k.to_string()).collect();
        let _ = writeln!(s, "psd {}", psd.join(" ").trim_end());
        let _ = writeln!(s, "rows {}", self.b.len());
        let obj: Vec<(usize, f64)> = self.c.iter().copied().enumerate().filter(|e| e.1 != 0.0).collect();
        let _ = writeln!(s, "objective {}", obj.len());
        for (i, v) in obj {
            let _ = writeln!(s, "{i} {v:?}");
        }
        let rhs: Vec<(usize, f64)> = self.b.iter().copied().enumerate().filter(|e| e.1 != 0.0).collect();
        let _ = writeln!(s, "rhs {}", rhs.len());
        for (i, v) in rhs {
            let _ = writeln!(s, "{i} {v:?}");
        }
        let _ = writeln!(s, "matrix {}", self.a.nnz());
        for (r, row) in self.a.rows.iter().enumerate() {
            for &(c, v) in row {
                let _ = writeln!(s, "{r} {c} {v:?}");
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, SolveError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let perr = |line: usize, msg: &str| SolveError::Parse { line, msg: msg.to_string() };
        let mut next = |what: &str| -> Result<(usize, Vec<String>), SolveError> {
            let (ln, l) = lines.next().ok_or_else(|| perr(0, &format!("unexpected end, wanted {what}")))?;
            let toks: Vec<String> = l.split_whitespace().map(str::to_string).collect();
            if toks[0] != what && !what.is_empty() {
                return Err(perr(ln, &format!("expected '{what}', found '{}'", toks[0])));
            }
            Ok((ln, toks))
        };
        fn num<T: std::str::FromStr>(ln: usize, t: &str) -> Result<T, SolveError> {
            t.parse().map_err(|_| SolveError::Parse {
                line: ln,
                msg: format!("bad number '{t}'"),
            })
        }
        let (ln, h) = next("conic")?;
        if h.get(1).map(String::as_str) != Some("1") {
            return Err(perr(ln, "unsupported version"));
        }
        let (ln, t) = next("free")?;
        let free = num(ln, &t[1])?;
        let (ln, t) = next("nonneg")?;
        let nonneg = num(ln, &t[1])?;
        let (ln, t) = next("psd")?;
        let psd = t[1..].iter().map(|v| num(ln, v)).collect::<Result<Vec<usize>, _>>()?;
        let (ln, t) = next("rows")?;
        let m: usize = num(ln, &t[1])?;
        let cones = ConeLayout { free, nonneg, psd };
        let n = cones.dim();
        let mut c = vec![0.0; n];
        let (ln, t) = next("objective")?;
        let k: usize = num(ln, &t[1])?;
        for _ in 0..k {
            let (ln, t) = next("")?;
            let i: usize = num(ln, &t[0])?;
            if i >= n {
                return Err(perr(ln, "objective index out of range"));
            }
            c[i] = num(ln, &t[1])?;
        }
        let mut b = vec![0.0; m];
        let (ln, t) = next("rhs")?;
        let k: usize = num(ln, &t[1])?;
        for _ in 0..k {
            let (ln, t) = next("")?;
            let i: usize = num(ln, &t[0])?;
            if i >= m {
                return Err(perr(ln, "rhs index out of range"));
            }
            b[i] = num(ln, &t[1])?;
        }
        let (ln, t) = next("matrix")?;
        let k: usize = num(ln, &t[1])?;
        let mut trips = Vec::with_capacity(k);
        for _ in 0..k {
            let (ln, t) = next("")?;
            let r: usize = num(ln, &t[0])?;
            let col: usize = num(ln, &t[1])?;
            if r >= m || col >= n {
                return Err(perr(ln, "matrix index out of range"));
            }
            trips.push((r, col, num(ln, &t[2])?));
        }
        let a = SparseRows::from_triplets(m, n, &trips);
        Self::new(c, a, b, cones)
    }

    pub fn write(&self, path: &Path) -> Result<(), SolveError> {
        fs::write(path, self.to_text()).map_err(|e| SolveError::Io(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self, SolveError> {
        Self::from_text(&fs::read_to_string(path).map_err(|e| SolveError::Io(e.to_string()))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    /// No `x` satisfies the constraints; `y` is a certificate.
    Infeasible,
    /// The objective is unbounded below; `x` is a recession direction.
    Unbounded,
    Stalled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationLog {
    pub pobj: f64,
    pub dobj: f64,
    pub pres: f64,
    pub dres: f64,
    pub gap: f64,
    pub mu: f64,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConicSolution {
    pub status: SolveStatus,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub s: Vec<f64>,
    pub pobj: f64,
    pub dobj: f64,
    /// Relative primal residual `|Ax - b| / (1 + |b|)`.
    pub pres: f64,
    /// Relative dual residual `|A^T y + s - c| / (1 + |c|)`.
    pub dres: f64,
    /// Relative gap `|c^T x - b^T y| / (1 + |c^T x| + |b^T y|)`.
    pub gap: f64,
    pub iterations: usize,
    /// SHA-256 over the bit patterns of every iterate.
    pub iterate_hash: String,
    pub log: Vec<IterationLog>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Accept a Farkas ray once `|A^T y + s| <= infeasibility_tol * b^T y`
    /// in the normalized data, i.e. no feasible point of normalized norm
    /// below `1 / infeasibility_tol` exists.
    pub infeasibility_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200,
            infeasibility_tol: 1e-6,
        }
    }
}

/// Dense lower Cholesky factor stored row-major.
struct Chol {
    n: usize,
    l: Vec<f64>,
}

impl Chol {
    /// Factors `a` (row-major, only the lower triangle is read). Adds
    /// increasing diagonal shifts until the factorization succeeds.
    fn factor(a: &[f64], n: usize) -> Option<Self> {
        let maxdiag = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max).max(1e-300);
        let mut shift = 0.0;
        for _ in 0..12 {
            if let Some(c) = Self::try_factor(a, n, shift) {
                return Some(c);
            }
            shift = if shift == 0.0 { 1e-14 * maxdiag } else { shift * 100.0 };
        }
        None
    }

    fn try_factor(a: &[f64], n: usize, shift: f64) -> Option<Self> {
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let (ri, rj) = (&l[i * n..i * n + j], &l[j * n..j * n + j]);
                let dot: f64 = ri.iter().zip(rj).map(|(p, q)| p * q).sum();
                let v = a[i * n + j] - dot;
                if i == j {
                    let d = v + shift;
                    if !(d > 0.0) || !d.is_finite() {
                        return None;
                    }
                    l[i * n + i] = d.sqrt();
                } else {
                    l[i * n + j] = v / l[j * n + j];
                }
            }
        }
        Some(Self { n, l })
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut z = b.to_vec();
        for i in 0..n {
            let row = &self.l[i * n..i * n + i];
            let dot: f64 = row.iter().zip(&z[..i]).map(|(p, q)| p * q).sum();
            z[i] = (z[i] - dot) / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut v = z[i];
            for k in i + 1..n {
                v -= self.l[k * n + i] * z[k];
            }
            z[i] = v / self.l[i * n + i];
        }
        z
    }
}

/// Per-block Nesterov-Todd scaling: `X = G L G^T`, `S = G^-T L G^-1`.
struct PsdScaling {
    g: DMatrix<f64>,
    ginv: DMatrix<f64>,
    w: DMatrix<f64>,
    lambda: DVector<f64>,
}

fn lower_chol(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    nalgebra::Cholesky::new(m.clone()).map(|c| c.l())
}

fn nt_scaling(x: &DMatrix<f64>, s: &DMatrix<f64>) -> Option<PsdScaling> {
    let lx = lower_chol(x)?;
    let ls = lower_chol(s)?;
    let svd = SVD::new(ls.transpose() * &lx, true, true);
    let u = svd.u?;
    let v = svd.v_t?.transpose();
    let lambda = svd.singular_values;
    if lambda.iter().any(|&l| !(l > 0.0)) {
        return None;
    }
    let isq = lambda.map(|l| 1.0 / l.sqrt());
    let sq = lambda.map(f64::sqrt);
    let g = &lx * &v * DMatrix::from_diagonal(&isq);
    // G^-1 = diag(l)^-1/2 U^T L_s^T.
    let ginv = DMatrix::from_diagonal(&isq) * u.transpose() * ls.transpose();
    let w = &g * g.transpose();
    let _ = sq;
    Some(PsdScaling { g, ginv, w, lambda })
}

struct Scaling {
    orth: Vec<f64>,
    orth_lambda: Vec<f64>,
    psd: Vec<PsdScaling>,
}

/// Problem data after normalization, plus cached structure.
struct Work {
    a: SparseRows,
    b: Vec<f64>,
    c: Vec<f64>,
    cones: ConeLayout,
    /// For each PSD block: rows touching it with (local index, value).
    block_rows: Vec<Vec<(usize, Vec<(usize, f64)>)>>,
    /// For each orthant column: (row, value).
    orth_cols: Vec<Vec<(usize, f64)>>,
    /// Free columns as dense vectors over rows.
    free_cols: Vec<Vec<f64>>,
}

impl Work {
    fn new(a: SparseRows, b: Vec<f64>, c: Vec<f64>, cones: ConeLayout) -> Self {
        let m = a.nrows();
        let f = cones.free;
        let l = cones.nonneg;
        let mut block_rows = vec![Vec::new(); cones.psd.len()];
        let mut orth_cols = vec![Vec::new(); l];
        let mut free_cols = vec![vec![0.0; m]; f];
        let offsets: Vec<usize> = (0..cones.psd.len()).map(|k| cones.psd_offset(k)).collect();
        let sizes: Vec<usize> = cones.psd.iter().map(|k| k * (k + 1) / 2).collect();
        for (r, row) in a.rows.iter().enumerate() {
            let mut per_block: Vec<Vec<(usize, f64)>> = vec![Vec::new(); cones.psd.len()];
            for &(col, v) in row {
                if col < f {
                    free_cols[col][r] = v;
                } else if col < f + l {
                    orth_cols[col - f].push((r, v));
                } else {
                    let k = offsets.partition_point(|&o| o <= col) - 1;
                    debug_assert!(col - offsets[k] < sizes[k]);
                    per_block[k].push((col - offsets[k], v));
                }
            }
            for (k, entries) in per_block.into_iter().enumerate() {
                if !entries.is_empty() {
                    block_rows[k].push((r, entries));
                }
            }
        }
        Self {
            a,
            b,
            c,
            cones,
            block_rows,
            orth_cols,
            free_cols,
        }
    }

    fn m(&self) -> usize {
        self.b.len()
    }

    fn dim(&self) -> usize {
        self.c.len()
    }

    /// Identity element of the cone part; zero on free coordinates.
    fn unit(&self) -> Vec<f64> {
        let mut e = vec![0.0; self.dim()];
        let f = self.cones.free;
        for i in 0..self.cones.nonneg {
            e[f + i] = 1.0;
        }
        for (k, &ord) in self.cones.psd.iter().enumerate() {
            let off = self.cones.psd_offset(k);
            for j in 0..ord {
                e[off + svec_index(j, j)] = 1.0;
            }
        }
        e
    }

    fn scaling(&self, x: &[f64], s: &[f64]) -> Option<Scaling> {
        let f = self.cones.free;
        let l = self.cones.nonneg;
        let mut orth = Vec::with_capacity(l);
        let mut orth_lambda = Vec::with_capacity(l);
        for i in 0..l {
            let (xi, si) = (x[f + i], s[f + i]);
            if !(xi > 0.0 && si > 0.0) {
                return None;
            }
            orth.push((xi / si).sqrt());
            orth_lambda.push((xi * si).sqrt());
        }
        let mut psd = Vec::new();
        for (k, &ord) in self.cones.psd.iter().enumerate() {
            let off = self.cones.psd_offset(k);
            let len = ord * (ord + 1) / 2;
            let xm = smat(&x[off..off + len], ord);
            let sm = smat(&s[off..off + len], ord);
            psd.push(nt_scaling(&xm, &sm)?);
        }
        Some(Scaling { orth, orth_lambda, psd })
    }

    /// `W(v)` on the cone part: `g^2 v` on the orthant, `W V W` on blocks.
    /// Free coordinates map to zero.
    fn apply_w(&self, sc: &Scaling, v: &[f64]) -> Vec<f64> {
        let f = self.cones.free;
        let mut out = vec![0.0; v.len()];
        for (i, g) in sc.orth.iter().enumerate() {
            out[f + i] = g * g * v[f + i];
        }
        for (k, &ord) in self.cones.psd.iter().enumerate() {
            let off = self.cones.psd_offset(k);
            let len = ord * (ord + 1) / 2;
            let vm = smat(&v[off..off + len], ord);
            let w = &sc.psd[k].w;
            let r = w * vm * w;
            out[off..off + len].copy_from_slice(&svec(&r));
        }
        out
    }

    /// Dense normal matrix `A_K W A_K^T`, row-major.
    fn normal_matrix(&self, sc: &Scaling) -> Vec<f64> {
        let m = self.m();
        let mut nm = vec![0.0; m * m];
        for (i, col) in self.orth_cols.iter().enumerate() {
            let d = sc.orth[i] * sc.orth[i];
            for &(r1, v1) in col {
                for &(r2, v2) in col {
                    if r2 <= r1 {
                        nm[r1 * m + r2] += d * v1 * v2;
                    }
                }
            }
        }
        for (k, &ord) in self.cones.psd.iter().enumerate() {
            let w = &sc.psd[k].w;
            let rows = &self.block_rows[k];
            let len = ord * (ord + 1) / 2;
            let mut t = vec![0.0; len];
            for (a_idx, (r1, e1)) in rows.iter().enumerate() {
                // t = svec(W E W) for the symmetric matrix E stored in e1.
                let mut tm = DMatrix::<f64>::zeros(ord, ord);
                for &(idx, v) in e1 {
                    let (p, q) = unsvec(idx);
                    if p == q {
                        let wp = w.column(p);
                        tm.ger(v, &wp, &wp, 1.0);
                    } else {
                        let h = v / SQRT2;
                        let (wp, wq) = (w.column(p), w.column(q));
                        tm.ger(h, &wp, &wq, 1.0);
                        tm.ger(h, &wq, &wp, 1.0);
                    }
                }
                let mut pos = 0;
                for j in 0..ord {
                    for i in 0..=j {
                        t[pos] = if i == j { tm[(i, i)] } else { SQRT2 * tm[(i, j)] };
                        pos += 1;
                    }
                }
                for (r2, e2) in &rows[..=a_idx] {
                    let dot: f64 = e2.iter().map(|&(idx, v)| v * t[idx]).sum();
                    nm[r1 * m + r2] += dot;
                }
            }
        }
        nm
    }
}

/// `(i, j)` with `i <= j` for a stored-triangle index.
fn unsvec(idx: usize) -> (usize, usize) {
    let mut j = ((((8 * idx + 1) as f64).sqrt() - 1.0) / 2.0) as usize;
    while j * (j + 1) / 2 > idx {
        j -= 1;
    }
    while (j + 1) * (j + 2) / 2 <= idx {
        j += 1;
    }
    (idx - j * (j + 1) / 2, j)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Largest `alpha` with `v + alpha dv` in the cone (capped at `cap`).
fn max_step(work: &Work, sc: &Scaling, dv: &[f64], primal: bool, cap: f64) -> f64 {
    let f = work.cones.free;
    let mut alpha = cap;
    for i in 0..work.cones.nonneg {
        // Scaled point is lambda; scaled direction dv / g (primal) or dv g (dual).
        let g = sc.orth[i];
        let d = if primal { dv[f + i] / g } else { dv[f + i] * g };
        let lam = sc.orth_lambda[i];
        if d < 0.0 {
            alpha = alpha.min(-lam / d);
        }
    }
    for (k, &ord) in work.cones.psd.iter().enumerate() {
        let off = work.cones.psd_offset(k);
        let len = ord * (ord + 1) / 2;
        let dm = smat(&dv[off..off + len], ord);
        let p = &sc.psd[k];
        let scaled = if primal { &p.ginv * dm * p.ginv.transpose() } else { p.g.transpose() * dm * &p.g };
        let isq = p.lambda.map(|l| 1.0 / l.sqrt());
        let dd = DMatrix::from_diagonal(&isq);
        let t = &dd * scaled * &dd;
        let lmin = SymmetricEigen::new((&t + t.transpose()) * 0.5).eigenvalues.min();
        if lmin < 0.0 {
            alpha = alpha.min(-1.0 / lmin);
        }
    }
    alpha
}

/// Scaled directions for the second-order term.
fn scaled_dirs(work: &Work, sc: &Scaling, dx: &[f64], ds: &[f64]) -> (Vec<f64>, Vec<DMatrix<f64>>) {
    let f = work.cones.free;
    let orth: Vec<f64> = (0..work.cones.nonneg)
        .map(|i| (dx[f + i] / sc.orth[i]) * (ds[f + i] * sc.orth[i]))
        .collect();
    let mut blocks = Vec::new();
    for (k, &ord) in work.cones.psd.iter().enumerate() {
        let off = work.cones.psd_offset(k);
        let len = ord * (ord + 1) / 2;
        let p = &sc.psd[k];
        let dxs = &p.ginv * smat(&dx[off..off + len], ord) * p.ginv.transpose();
        let dss = p.g.transpose() * smat(&ds[off..off + len], ord) * &p.g;
        let prod = &dxs * &dss;
        blocks.push((&prod + prod.transpose()) * 0.5);
    }
    (orth, blocks)
}

/// Complementarity right-hand side `r_c` with `dx + W(ds) = r_c`.
fn comp_rhs(work: &Work, sc: &Scaling, sigma_mu: f64, second: Option<&(Vec<f64>, Vec<DMatrix<f64>>)>) -> Vec<f64> {
    let f = work.cones.free;
    let mut rc = vec![0.0; work.dim()];
    for i in 0..work.cones.nonneg {
        let lam = sc.orth_lambda[i];
        let corr = second.map_or(0.0, |s| s.0[i]);
        let z = (sigma_mu - lam * lam - corr) / lam;
        rc[f + i] = sc.orth[i] * z;
    }
    for (k, &ord) in work.cones.psd.iter().enumerate() {
        let off = work.cones.psd_offset(k);
        let p = &sc.psd[k];
        let mut z = DMatrix::zeros(ord, ord);
        for i in 0..ord {
            for j in 0..ord {
                let mut r = -second.map_or(0.0, |s| s.1[k][(i, j)]);
                if i == j {
                    r += sigma_mu - p.lambda[i] * p.lambda[i];
                }
                z[(i, j)] = 2.0 * r / (p.lambda[i] + p.lambda[j]);
            }
        }
        let full = &p.g * z * p.g.transpose();
        let v = svec(&full);
        rc[off..off + v.len()].copy_from_slice(&v);
    }
    rc
}

/// Factored bordered system `[M A_f; A_f^T 0]`.
struct Kkt {
    chol: Chol,
    m: usize,
    free: Vec<Vec<f64>>,
    minv_af: Vec<Vec<f64>>,
    schur: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
}

impl Kkt {
    fn new(nm: Vec<f64>, m: usize, free: &[Vec<f64>]) -> Option<Self> {
        let chol = Chol::factor(&nm, m)?;
        let minv_af: Vec<Vec<f64>> = free.iter().map(|col| chol.solve(col)).collect();
        let fcount = free.len();
        let schur = if fcount > 0 {
            let s = DMatrix::from_fn(fcount, fcount, |i, j| dot(&free[i], &minv_af[j]));
            let s = (&s + s.transpose()) * 0.5;
            Some(s.lu())
        } else {
            None
        };
        Some(Self {
            chol,
            m,
            free: free.to_vec(),
            minv_af,
            schur,
        })
    }

    fn solve_once(&self, p: &[f64], fr: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let minv_p = self.chol.solve(p);
        match &self.schur {
            None => (minv_p, Vec::new()),
            Some(lu) => {
                let rhs = DVector::from_iterator(fr.len(), (0..fr.len()).map(|i| dot(&self.free[i], &minv_p) - fr[i]));
                let xf = lu.solve(&rhs).unwrap_or_else(|| DVector::zeros(fr.len()));
                let mut y = minv_p;
                for (i, col) in self.minv_af.iter().enumerate() {
                    for r in 0..self.m {
                        y[r] -= col[r] * xf[i];
                    }
                }
                (y, xf.iter().copied().collect())
            }
        }
    }

    /// Applies the bordered system using the sparse data rather than the
    /// stored normal matrix, so refinement sees the true residual.
    fn apply(&self, work: &Work, sc: &Scaling, y: &[f64], xf: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let m = self.m;
        let mut p = work.a.mul(&work.apply_w(sc, &work.a.tmul(y)));
        for (k, col) in self.free.iter().enumerate() {
            for r in 0..m {
                p[r] += col[r] * xf[k];
            }
        }
        let fr = self.free.iter().map(|col| dot(col, y)).collect();
        (p, fr)
    }

    /// Solve with iterative refinement until the residual stops shrinking.
    fn solve(&self, work: &Work, sc: &Scaling, p: &[f64], fr: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (mut y, mut xf) = self.solve_once(p, fr);
        let mut last = f64::INFINITY;
        for _ in 0..REFINE_ROUNDS {
            let (ap, af) = self.apply(work, sc, &y, &xf);
            let rp: Vec<f64> = p.iter().zip(&ap).map(|(a, b)| a - b).collect();
            let rf: Vec<f64> = fr.iter().zip(&af).map(|(a, b)| a - b).collect();
            let r = norm(&rp) + norm(&rf);
            if r == 0.0 || r > 0.5 * last {
                break;
            }
            last = r;
            let (dy, dxf) = self.solve_once(&rp, &rf);
            y.iter_mut().zip(&dy).for_each(|(a, b)| *a += b);
            xf.iter_mut().zip(&dxf).for_each(|(a, b)| *a += b);
        }
        (y, xf)
    }
}

const REFINE_ROUNDS: usize = 6;

struct Direction {
    dx: Vec<f64>,
    dy: Vec<f64>,
    ds: Vec<f64>,
    dtau: f64,
    dkappa: f64,
}

struct Residuals {
    rp: Vec<f64>,
    rd: Vec<f64>,
    rg: f64,
}

#[allow(clippy::too_many_arguments)]
fn direction(
    work: &Work,
    sc: &Scaling,
    kkt: &Kkt,
    res: &Residuals,
    eta: f64,
    rc: &[f64],
    rtk: f64,
    tau: f64,
    kappa: f64,
) -> Direction {
    let f = work.cones.free;
    // Cone part of the dual residual with free coordinates zeroed.
    let mut rd_k = res.rd.clone();
    rd_k[..f].iter_mut().for_each(|v| *v = 0.0);
    let mut c_k = work.c.clone();
    c_k[..f].iter_mut().for_each(|v| *v = 0.0);

    let w_rd = work.apply_w(sc, &rd_k);
    let w_c = work.apply_w(sc, &c_k);
    let base: Vec<f64> = rc.iter().zip(&w_rd).map(|(a, b)| a + eta * b).collect();
    let a_base = work.a.mul(&base);
    let a_wc = work.a.mul(&w_c);
    let p0: Vec<f64> = (0..work.m()).map(|i| -eta * res.rp[i] - a_base[i]).collect();
    let p1: Vec<f64> = (0..work.m()).map(|i| work.b[i] + a_wc[i]).collect();
    let f0: Vec<f64> = (0..f).map(|i| -eta * res.rd[i]).collect();
    let f1: Vec<f64> = work.c[..f].to_vec();
    let (dy0, xf0) = kkt.solve(work, sc, &p0, &f0);
    let (dy1, xf1) = kkt.solve(work, sc, &p1, &f1);

    let wat0 = work.apply_w(sc, &work.a.tmul(&dy0));
    let wat1 = work.apply_w(sc, &work.a.tmul(&dy1));
    let mut x0: Vec<f64> = (0..work.dim()).map(|i| base[i] + wat0[i]).collect();
    let mut x1: Vec<f64> = (0..work.dim()).map(|i| wat1[i] - w_c[i]).collect();
    for i in 0..f {
        x0[i] = xf0[i];
        x1[i] = xf1[i];
    }
    let num = -eta * res.rg - dot(&work.c, &x0) + dot(&work.b, &dy0) - rtk / tau;
    let den = dot(&work.c, &x1) - dot(&work.b, &dy1) - kappa / tau;
    let dtau = num / den;
    let dx: Vec<f64> = x0.iter().zip(&x1).map(|(a, b)| a + b * dtau).collect();
    let dy: Vec<f64> = dy0.iter().zip(&dy1).map(|(a, b)| a + b * dtau).collect();
    let aty = work.a.tmul(&dy);
    let mut ds: Vec<f64> = (0..work.dim()).map(|i| -eta * res.rd[i] - aty[i] + work.c[i] * dtau).collect();
    ds[..f].iter_mut().for_each(|v| *v = 0.0);
    let dkappa = (rtk - kappa * dtau) / tau;
    Direction {
        dx,
        dy,
        ds,
        dtau,
        dkappa,
    }
}

fn hash_iterate(h: &mut Sha256, x: &[f64], y: &[f64], s: &[f64], tau: f64, kappa: f64) {
    for v in x.iter().chain(y).chain(s).chain([tau, kappa].iter()) {
        h.update(v.to_bits().to_le_bytes());
    }
}

/// Solves `program` to relative tolerance `opts.tol`.
pub fn solve(program: &ConicProgram, opts: &SolverOptions) -> Result<ConicSolution, SolveError> {
    program.validate()?;
    if !(opts.tol > 0.0) {
        return Err(SolveError::Malformed("tolerance must be positive".into()));
    }
    let m = program.b.len();
    let n = program.cones.dim();

    // Row equilibration, then unit-norm b and c.
    let mut a = program.a.clone();
    let mut b = program.b.clone();
    let mut row_scale = vec![1.0; m];
    for (r, row) in a.rows.iter_mut().enumerate() {
        let nr = row.iter().map(|e| e.1 * e.1).sum::<f64>().sqrt();
        if nr > 0.0 {
            row_scale[r] = 1.0 / nr;
            row.iter_mut().for_each(|e| e.1 /= nr);
            b[r] /= nr;
        }
    }
    let bs = norm(&b);
    let bs = if bs > 0.0 { bs } else { 1.0 };
    let cs = norm(&program.c);
    let cs = if cs > 0.0 { cs } else { 1.0 };
    b.iter_mut().for_each(|v| *v /= bs);
    let c: Vec<f64> = program.c.iter().map(|v| v / cs).collect();
    let work = Work::new(a, b, c, program.cones.clone());

    let f = work.cones.free;
    let nu = work.cones.degree() as f64;
    let mut x = work.unit();
    let mut s = work.unit();
    let mut y = vec![0.0; m];
    let mut tau = 1.0;
    let mut kappa = 1.0;
    let mut hasher = Sha256::new();
    let mut log = Vec::new();
    let bnorm = norm(&work.b);
    let cnorm = norm(&work.c);
    let mut status = SolveStatus::Stalled;
    let mut iterations = 0;
    let mut small_steps = 0;

    for iter in 0..=opts.max_iter {
        iterations = iter;
        hash_iterate(&mut hasher, &x, &y, &s, tau, kappa);
        let ax = work.a.mul(&x);
        let aty = work.a.tmul(&y);
        let rp: Vec<f64> = (0..m).map(|i| ax[i] - work.b[i] * tau).collect();
        let rd: Vec<f64> = (0..n).map(|i| aty[i] + s[i] - work.c[i] * tau).collect();
        let cx = dot(&work.c, &x);
        let by = dot(&work.b, &y);
        let rg = cx - by + kappa;
        let res = Residuals { rp, rd, rg };
        let mu = (dot(&x[f..], &s[f..]) + tau * kappa) / (nu + 1.0);
        if !mu.is_finite() || x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(SolveError::NonFinite(iter));
        }

        let pobj = cx / tau;
        let dobj = by / tau;
        let pres = norm(&res.rp) / tau / (1.0 + bnorm);
        let dres = norm(&res.rd) / tau / (1.0 + cnorm);
        let gap = (pobj - dobj).abs() / (1.0 + pobj.abs() + dobj.abs());
        log.push(IterationLog {
            pobj: pobj * cs,
            dobj: dobj * cs,
            pres,
            dres,
            gap,
            mu,
            step: 0.0,
        });
        if pres <= opts.tol && dres <= opts.tol && gap <= opts.tol {
            // Stop only once the unscaled point meets the tolerance as well.
            let (xo, yo, so) = unscale(&x, &y, &s, bs / tau, cs / tau, &row_scale);
            let o = residuals(program, &xo, &yo, &so);
            if (o.2 <= opts.tol && o.3 <= opts.tol && o.4 <= opts.tol) || iter == opts.max_iter {
                status = SolveStatus::Optimal;
                break;
            }
        }
        // Infeasibility certificates.
        let aty_s: Vec<f64> = (0..n).map(|i| aty[i] + s[i]).collect();
        if by > 0.0 && norm(&aty_s) / by <= opts.infeasibility_tol {
            status = SolveStatus::Infeasible;
            break;
        }
        if cx < 0.0 && norm(&ax) / (-cx) <= opts.infeasibility_tol {
            status = SolveStatus::Unbounded;
            break;
        }
        if iter == opts.max_iter {
            break;
        }

        let sc = match work.scaling(&x, &s) {
            Some(sc) => sc,
            None => break,
        };
        let nm = work.normal_matrix(&sc);
        let kkt = match Kkt::new(nm, m, &work.free_cols) {
            Some(k) => k,
            None => break,
        };

        // Predictor.
        let rc_aff = comp_rhs(&work, &sc, 0.0, None);
        let aff = direction(&work, &sc, &kkt, &res, 1.0, &rc_aff, -tau * kappa, tau, kappa);
        let mut a_aff = max_step(&work, &sc, &aff.dx, true, 1.0).min(max_step(&work, &sc, &aff.ds, false, 1.0));
        if aff.dtau < 0.0 {
            a_aff = a_aff.min(-tau / aff.dtau);
        }
        if aff.dkappa < 0.0 {
            a_aff = a_aff.min(-kappa / aff.dkappa);
        }
        let sigma = (1.0 - a_aff).clamp(0.0, 1.0).powi(3);

        // Corrector.
        let second = scaled_dirs(&work, &sc, &aff.dx, &aff.ds);
        let rc = comp_rhs(&work, &sc, sigma * mu, Some(&second));
        let rtk = sigma * mu - tau * kappa - aff.dtau * aff.dkappa;
        let d = direction(&work, &sc, &kkt, &res, 1.0 - sigma, &rc, rtk, tau, kappa);
        let mut alpha = max_step(&work, &sc, &d.dx, true, 1e6).min(max_step(&work, &sc, &d.ds, false, 1e6));
        if d.dtau < 0.0 {
            alpha = alpha.min(-tau / d.dtau);
        }
        if d.dkappa < 0.0 {
            alpha = alpha.min(-kappa / d.dkappa);
        }
        let alpha = (0.99 * alpha).min(1.0);
        if let Some(last) = log.last_mut() {
            last.step = alpha;
        }
        if alpha < 1e-10 {
            small_steps += 1;
            if small_steps >= 3 {
                break;
            }
        } else {
            small_steps = 0;
        }
        for i in 0..n {
            x[i] += alpha * d.dx[i];
            s[i] += alpha * d.ds[i];
        }
        for i in 0..m {
            y[i] += alpha * d.dy[i];
        }
        tau += alpha * d.dtau;
        kappa += alpha * d.dkappa;
        // Renormalize the homogeneous iterate to keep magnitudes moderate.
        let scale = tau + kappa;
        if scale > 1e6 || scale < 1e-6 {
            x.iter_mut().chain(y.iter_mut()).chain(s.iter_mut()).for_each(|v| *v /= scale);
            tau /= scale;
            kappa /= scale;
        }
    }

    // Undo normalization: x_orig = x * bs / tau, y_orig = y * cs / tau (row-scaled), s_orig = s * cs / tau.
    let (xs, ys) = match status {
        SolveStatus::Optimal | SolveStatus::Stalled => (bs / tau, cs / tau),
        SolveStatus::Infeasible | SolveStatus::Unbounded => (1.0, 1.0),
    };
    let (x_out, y_out, s_out) = unscale(&x, &y, &s, xs, ys, &row_scale);
    let mut sol = ConicSolution {
        status,
        x: x_out,
        y: y_out,
        s: s_out,
        pobj: 0.0,
        dobj: 0.0,
        pres: 0.0,
        dres: 0.0,
        gap: 0.0,
        iterations,
        iterate_hash: hex::encode(hasher.finalize()),
        log,
    };
    let rep = residuals(program, &sol.x, &sol.y, &sol.s);
    sol.pobj = rep.0;
    sol.dobj = rep.1;
    sol.pres = rep.2;
    sol.dres = rep.3;
    sol.gap = rep.4;
    if sol.status == SolveStatus::Optimal {
        // Never report optimal outside the tolerance in the original data.
        if sol.pres > opts.tol || sol.dres > opts.tol || sol.gap > opts.tol {
            sol.status = SolveStatus::Stalled;
        }
    }
    Ok(sol)
}

fn unscale(x: &[f64], y: &[f64], s: &[f64], xs: f64, ys: f64, row_scale: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    (
        x.iter().map(|v| v * xs).collect(),
        y.iter().zip(row_scale).map(|(v, r)| v * ys * r).collect(),
        s.iter().map(|v| v * ys).collect(),
    )
}

/// `(pobj, dobj, pres, dres, gap)` in the original data.
fn residuals(p: &ConicProgram, x: &[f64], y: &[f64], s: &[f64]) -> (f64, f64, f64, f64, f64) {
    let ax = p.a.mul(x);
    let aty = p.a.tmul(y);
    let rp: Vec<f64> = ax.iter().zip(&p.b).map(|(a, b)| a - b).collect();
    let rd: Vec<f64> = (0..p.c.len()).map(|i| aty[i] + s[i] - p.c[i]).collect();
    let pobj = dot(&p.c, x);
    let dobj = dot(&p.b, y);
    (
        pobj,
        dobj,
        norm(&rp) / (1.0 + norm(&p.b)),
        norm(&rd) / (1.0 + norm(&p.c)),
        (pobj - dobj).abs() / (1.0 + pobj.abs() + dobj.abs()),
    )
}

/// Independent recomputation of optimality measures.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualReport {
    /// `|A x - b| / (1 + |b|)`.
    pub primal: f64,
    /// Distance of `c - A^T y` from the dual cone, relative to `1 + |c|`.
    pub dual: f64,
    /// `|c^T x - b^T y| / (1 + |c^T x| + |b^T y|)`.
    pub gap: f64,
    /// Most negative orthant entry or block eigenvalue of `x`, as a positive
    /// violation (zero when inside the cone).
    pub primal_cone: f64,
    pub min_eig_primal: Vec<f64>,
    pub min_eig_dual: Vec<f64>,
}

impl ResidualReport {
    pub fn worst(&self) -> f64 {
        self.primal.max(self.dual).max(self.gap).max(self.primal_cone)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.worst() <= tol
    }
}

/// Recomputes residuals from scratch with a dense column sweep, so the
/// summation order differs from the solver's.
pub fn certify(program: &ConicProgram, sol: &ConicSolution) -> ResidualReport {
    let dense = program.a.to_dense();
    let x = DVector::from_column_slice(&sol.x);
    let y = DVector::from_column_slice(&sol.y);
    let b = DVector::from_column_slice(&program.b);
    let c = DVector::from_column_slice(&program.c);
    let mut ax = DVector::zeros(program.b.len());
    for j in (0..dense.ncols()).rev() {
        ax.axpy(x[j], &dense.column(j), 1.0);
    }
    let primal = (ax - &b).norm() / (1.0 + b.norm());
    let slack = &c - dense.transpose() * &y;
    let cones = &program.cones;
    let f = cones.free;
    let mut dual_viol = slack.rows(0, f).norm_squared();
    let mut primal_viol: f64 = 0.0;
    for i in 0..cones.nonneg {
        dual_viol += slack[f + i].min(0.0).powi(2);
        primal_viol = primal_viol.max(-x[f + i]);
    }
    let mut min_eig_primal = Vec::new();
    let mut min_eig_dual = Vec::new();
    for (k, &ord) in cones.psd.iter().enumerate() {
        let off = cones.psd_offset(k);
        let len = ord * (ord + 1) / 2;
        let xe = SymmetricEigen::new(smat(&sol.x[off..off + len], ord)).eigenvalues.min();
        let se = SymmetricEigen::new(smat(&slack.as_slice()[off..off + len], ord)).eigenvalues.min();
        primal_viol = primal_viol.max(-xe);
        dual_viol += se.min(0.0).powi(2);
        min_eig_primal.push(xe);
        min_eig_dual.push(se);
    }
    let pobj = c.dot(&x);
    let dobj = b.dot(&y);
    ResidualReport {
        primal,
        dual: dual_viol.sqrt() / (1.0 + c.norm()),
        gap: (pobj - dobj).abs() / (1.0 + pobj.abs() + dobj.abs()),
        primal_cone: primal_viol.max(0.0) / (1.0 + x.norm()),
        min_eig_primal,
        min_eig_dual,
    }
}

/// Writes `free.csv`, `nonneg.csv`, `psd_<k>.csv` (full matrices) for the
/// primal point and `dual.csv` for `y`.
pub fn write_solution_csv(program: &ConicProgram, sol: &ConicSolution, dir: &Path) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let col = |v: &[f64]| v.iter().map(|x| format!("{x:?}\n")).collect::<String>();
    let f = program.cones.free;
    let l = program.cones.nonneg;
    fs::write(dir.join("free.csv"), col(&sol.x[..f]))?;
    fs::write(dir.join("nonneg.csv"), col(&sol.x[f..f + l]))?;
    for (k, &ord) in program.cones.psd.iter().enumerate() {
        let off = program.cones.psd_offset(k);
        let m = smat(&sol.x[off..off + ord * (ord + 1) / 2], ord);
        let mut s = String::new();
        for i in 0..ord {
            let row: Vec<String> = (0..ord).map(|j| format!("{:?}", m[(i, j)])).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        fs::write(dir.join(format!("psd_{k}.csv")), s)?;
    }
    fs::write(dir.join("dual.csv"), col(&sol.y))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> SolverOptions {
        SolverOptions::default()
    }

    /// min x s.t. [[x, 1], [1, x]] psd, written with x free and a 2x2 slack.
    fn two_by_two() -> ConicProgram {
        // Columns: x (free), then svec of Z = (z00, z01*sqrt2, z11).
        let cones = ConeLayout {
            free: 1,
            nonneg: 0,
            psd: vec![2],
        };
        // Z00 - x = 0, Z11 - x = 0, Z01 = 1.
        let a = SparseRows::from_triplets(
            3,
            4,
            &[(0, 1, 1.0), (0, 0, -1.0), (1, 3, 1.0), (1, 0, -1.0), (2, 2, 1.0 / SQRT2)],
        );
        ConicProgram::new(vec![1.0, 0.0, 0.0, 0.0], a, vec![0.0, 0.0, 1.0], cones).unwrap()
    }

    #[test]
    fn svec_roundtrip_and_inner_product() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 5.0, 6.0, 3.0, 6.0, 9.0]);
        let b = DMatrix::from_row_slice(3, 3, &[2.0, -1.0, 0.5, -1.0, 1.0, 4.0, 0.5, 4.0, -3.0]);
        assert_eq!(smat(&svec(&a), 3), a);
        let ip = (&a * &b).trace();
        assert!((dot(&svec(&a), &svec(&b)) - ip).abs() < 1e-12);
        for idx in 0..21 {
            let (i, j) = unsvec(idx);
            assert_eq!(svec_index(i, j), idx);
        }
    }

    #[test]
    fn eigenvalue_condition() {
        let p = two_by_two();
        let sol = solve(&p, &opts()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.x[0] - 1.0).abs() < 1e-7, "{}", sol.x[0]);
        assert!(certify(&p, &sol).passes(1e-7));
    }

    #[test]
    fn trace_forces_diagonal() {
        // X psd 2x2, Tr X = 1, X00 = 1, objective zero.
        let cones = ConeLayout {
            free: 0,
            nonneg: 0,
            psd: vec![2],
        };
        let a = SparseRows::from_triplets(2, 3, &[(0, 0, 1.0), (0, 2, 1.0), (1, 0, 1.0)]);
        let p = ConicProgram::new(vec![0.0; 3], a, vec![1.0, 1.0], cones).unwrap();
        let sol = solve(&p, &opts()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        let x = smat(&sol.x, 2);
        assert!((x - DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0])).amax() < 1e-6);
    }

    #[test]
    fn linear_objective_on_spectraplex() {
        let cones = ConeLayout {
            free: 0,
            nonneg: 0,
            psd: vec![2],
        };
        let a = SparseRows::from_triplets(1, 3, &[(0, 0, 1.0), (0, 2, 1.0)]);
        let c = svec(&DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]));
        let p = ConicProgram::new(c, a, vec![1.0], cones).unwrap();
        let sol = solve(&p, &opts()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.pobj - 1.0).abs() < 1e-7);
    }

    #[test]
    fn detects_infeasible_lp() {
        // x >= 0, x1 + x2 = -1.
        let cones = ConeLayout {
            free: 0,
            nonneg: 2,
            psd: vec![],
        };
        let a = SparseRows::from_triplets(1, 2, &[(0, 0, 1.0), (0, 1, 1.0)]);
        let p = ConicProgram::new(vec![1.0, 1.0], a, vec![-1.0], cones).unwrap();
        assert_eq!(solve(&p, &opts()).unwrap().status, SolveStatus::Infeasible);
    }

    #[test]
    fn detects_unbounded_lp() {
        // min -x1, x1 - x2 = 0, x >= 0.
        let cones = ConeLayout {
            free: 0,
            nonneg: 2,
            psd: vec![],
        };
        let a = SparseRows::from_triplets(1, 2, &[(0, 0, 1.0), (0, 1, -1.0)]);
        let p = ConicProgram::new(vec![-1.0, 0.0], a, vec![0.0], cones).unwrap();
        assert_eq!(solve(&p, &opts()).unwrap().status, SolveStatus::Unbounded);
    }

    #[test]
    fn text_roundtrip() {
        let p = two_by_two();
        let back = ConicProgram::from_text(&p.to_text()).unwrap();
        assert_eq!(back, p);
        assert!(ConicProgram::from_text("conic 1\nfree 0\n").is_err());
    }

    #[test]
    fn malformed_layout_rejected() {
        let a = SparseRows::new(1, 2);
        let r = ConicProgram::new(vec![0.0; 3], a, vec![0.0], ConeLayout::default());
        assert!(matches!(r, Err(SolveError::Malformed(_))));
    }
}
