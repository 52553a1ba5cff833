//! Compiles the data-driven barrier conditions into one conic program.
//!
//! The matrix polynomial
//!
//! ```text
//! M(x) = [[-k Pb, 0, 0], [*, 0, Lb(x)], [*, *, -Pb/(1+r)]] - sum_j a_j(x) pad(R_j)
//! Lb(x) = [J(x) Pb; G(x) Kb(x)]
//! ```
//!
//! must be negative semidefinite. It is scalarized as `-y^T (M(x) + tI) y`
//! and matched coefficient by coefficient against a Gram form over
//! `y_a m_i(x)`. In [`SosDomain::Box`] the match also includes multipliers
//! `sigma_k(x, y) (x_k - lo_k)(hi_k - x_k)` for the state box, so the
//! condition is certified on the box only.
//!
//! Decision variables, in cone order:
//!
//! * free: coefficients of `Kb` (row, column, monomial), then `eta_bar`,
//!   then `delta_bar` in literal mode;
//! * nonnegative: constant multipliers `a_j`, then the literal-mode gap slack;
//! * PSD: `P0` with `Pb = lambda_min I + P0`, the ceiling slack
//!   `p_max I - Pb`, one slack `Pb - eta_bar v v^T` per initial-box vertex
//!   (or the single `z_eta` slack and the `z_delta` slack in literal mode),
//!   the main Gram matrix, the box multiplier Grams, and polynomial
//!   multiplier Grams when `d_alpha > 0`.
//!
//! The ceiling `Pb <= p_max I` fixes the scale: every constraint is
//! homogeneous in `(Pb, Kb, a, eta_bar)`, so without it the objective
//! `max eta_bar` would be unbounded.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformity::ConformityBlock;
use crate::polyalg::{monomials_up_to, Monomial, Poly, PolyMatrix};
use crate::region::{BoxSet, RegionSpec};
use crate::sdpsolve::{
    normalize_row, solve, svec_index, ConeLayout, ConicProgram, SolveError, SolveStatus, SolverOptions, SparseRows,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SosError {
    #[error("no data-conformity blocks supplied")]
    EmptyBlocks,
    #[error("kappa = {0} outside (0, 1]")]
    Kappa(f64),
    #[error("rho = {0} must be positive")]
    Rho(f64),
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("Gram degree {budget} cannot represent monomial {monomial} of degree {needed}")]
    DegreeBudget {
        monomial: String,
        needed: u32,
        budget: u32,
    },
    #[error("polynomial has odd degree {0}")]
    OddDegree(u32),
    #[error("multiplier degree {0} must be even")]
    OddMultiplier(u32),
    #[error("literal mode needs z_eta and z_delta")]
    MissingLiteralVectors,
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SosDomain {
    /// Certify on all of `R^n`.
    Global,
    /// Certify on the state box via quadratic box multipliers.
    Box,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompileOptions {
    pub kappa: f64,
    pub rho: f64,
    pub d_k: u32,
    pub d_alpha: u32,
    pub lambda_min: f64,
    /// Relative SOS margin; the absolute margin is this times the largest
    /// conformity-block entry (at least 1).
    pub margin_rel: f64,
    pub p_max: f64,
    pub domain: SosDomain,
    pub literal: bool,
    /// Overrides the half-degree of the Gram basis.
    pub gram_degree: Option<u32>,
}

impl Default for CompileOptions {
    fn default() -> Self {
        Self {
            kappa: 1.0,
            rho: 1.0,
            d_k: 1,
            d_alpha: 0,
            lambda_min: 1e-6,
            margin_rel: 1e-8,
            p_max: 1.0,
            domain: SosDomain::Box,
            literal: false,
            gram_degree: None,
        }
    }
}

/// Where each decision variable lives in the stacked vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarLayout {
    pub n: usize,
    pub m: usize,
    pub l: usize,
    pub q: usize,
    /// Order of `M(x)`: `2n + l + q`.
    pub order: usize,
    pub blocks_t: usize,
    pub margin: f64,
    pub options: CompileOptions,
    pub k_basis: Vec<Vec<u32>>,
    pub gram_basis: Vec<Vec<u32>>,
    pub mult_basis: Vec<Vec<u32>>,
    pub alpha_basis: Vec<Vec<u32>>,
    pub state_lo: Vec<f64>,
    pub state_hi: Vec<f64>,
    /// Gram and multiplier bases use `x^e / s^e` with these `s`, and the box
    /// polynomials are divided by `s_k^2`.
    pub basis_scale: Vec<f64>,
    pub vertices: Vec<Vec<f64>>,
    pub kbar_col: usize,
    pub eta_col: usize,
    pub delta_col: Option<usize>,
    /// First nonnegative column of the constant multipliers, if any.
    pub alpha_col: Option<usize>,
    pub gap_col: Option<usize>,
    /// PSD block indices.
    pub p0_block: usize,
    pub ceiling_block: usize,
    pub vertex_blocks: Vec<usize>,
    pub delta_block: Option<usize>,
    pub gram_block: usize,
    pub mult_blocks: Vec<usize>,
    pub alpha_blocks: Vec<usize>,
    /// Number of coefficient-matching equalities.
    pub matching_rows: usize,
    /// Set when the program is known to be infeasible by construction.
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdpProblem {
    pub program: ConicProgram,
    pub layout: VarLayout,
    /// `J(x)`, `l x n`.
    pub jac: PolyMatrix,
    /// `G(x)`, `q x m`.
    pub g: PolyMatrix,
    pub blocks: Vec<DMatrix<f64>>,
}

fn mono(e: &[u32]) -> Monomial {
    Monomial::new(e.to_vec())
}

/// Column and factor with `X_ij = factor * x[col]` for a stored block.
fn entry(cones: &ConeLayout, block: usize, i: usize, j: usize) -> (usize, f64) {
    let col = cones.psd_offset(block) + svec_index(i, j);
    (col, if i == j { 1.0 } else { std::f64::consts::FRAC_1_SQRT_2 })
}

struct Builder<'a> {
    cones: &'a ConeLayout,
    rows: Vec<Vec<(usize, f64)>>,
    rhs: Vec<f64>,
}

impl Builder<'_> {
    fn push(&mut self, mut row: Vec<(usize, f64)>, rhs: f64) {
        normalize_row(&mut row);
        self.rows.push(row);
        self.rhs.push(rhs);
    }

    fn sym(&self, block: usize, i: usize, j: usize, coef: f64) -> (usize, f64) {
        let (c, f) = entry(self.cones, block, i, j);
        (c, coef * f)
    }
}

/// Coefficient map of one scalar equation: variable terms and constant.
#[derive(Default, Clone)]
struct Eq {
    vars: Vec<(usize, f64)>,
    constant: f64,
}

/// Assembles the program. `jac` is `l x n`, `g` is `q x m`, `blocks` are the
/// `(n+l+q)`-square conformity matrices.
pub fn assemble_program(
    blocks: &[ConformityBlock],
    jac: &PolyMatrix,
    g: &PolyMatrix,
    regions: &RegionSpec,
    opts: &CompileOptions,
) -> Result<SdpProblem, SosError> {
    if blocks.is_empty() {
        return Err(SosError::EmptyBlocks);
    }
    if !(opts.kappa > 0.0 && opts.kappa <= 1.0) {
        return Err(SosError::Kappa(opts.kappa));
    }
    if !(opts.rho > 0.0) || !opts.rho.is_finite() {
        return Err(SosError::Rho(opts.rho));
    }
    if opts.d_alpha % 2 == 1 {
        return Err(SosError::OddMultiplier(opts.d_alpha));
    }
    let n = jac.cols();
    let l = jac.rows();
    let q = g.rows();
    let m = g.cols();
    let nlq = n + l + q;
    let order = 2 * n + l + q;
    if regions.dim() != n {
        return Err(SosError::Dimension {
            what: "regions",
            expected: n,
            got: regions.dim(),
        });
    }
    if jac.nvars() != n || g.nvars() != n {
        return Err(SosError::Dimension {
            what: "polynomial variables",
            expected: n,
            got: if jac.nvars() != n { jac.nvars() } else { g.nvars() },
        });
    }
    for b in blocks {
        if b.matrix.nrows() != nlq || b.matrix.ncols() != nlq {
            return Err(SosError::Dimension {
                what: "conformity block",
                expected: nlq,
                got: b.matrix.nrows(),
            });
        }
    }
    let literal = if opts.literal {
        match (&regions.z_eta, &regions.z_delta) {
            (Some(a), Some(b)) if a.len() == n && b.len() == n => Some((a.clone(), b.clone())),
            _ => return Err(SosError::MissingLiteralVectors),
        }
    } else {
        None
    };

    // Degree budget.
    let deg_gk = if g.degree() == 0 && g.is_zero() { 0 } else { g.degree() + opts.d_k };
    let need = jac.degree().max(deg_gk).max(opts.d_alpha);
    let h = opts.gram_degree.unwrap_or(need.div_ceil(2));
    if 2 * h < need {
        return Err(budget_error(jac, g, opts, n, h));
    }
    let gram_basis = monomials_up_to(n, 0, h);
    let mult_basis = if opts.domain == SosDomain::Box && h >= 1 {
        monomials_up_to(n, 0, h - 1)
    } else {
        Vec::new()
    };
    let k_basis = monomials_up_to(n, 0, opts.d_k);
    let alpha_basis = if opts.d_alpha > 0 {
        monomials_up_to(n, 0, opts.d_alpha / 2)
    } else {
        Vec::new()
    };
    let targets = monomials_up_to(n, 0, 2 * h);
    let target_idx: HashMap<Monomial, usize> = targets.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
    let t_count = blocks.len();

    // Cone layout.
    let kbar_col = 0;
    let eta_col = m * n * k_basis.len();
    let delta_col = literal.as_ref().map(|_| eta_col + 1);
    let free = eta_col + 1 + usize::from(literal.is_some());
    let alpha_col = (opts.d_alpha == 0).then_some(free);
    let mut nonneg = if opts.d_alpha == 0 { t_count } else { 0 };
    let gap_col = literal.as_ref().map(|_| free + nonneg);
    if literal.is_some() {
        nonneg += 1;
    }
    let mut psd = vec![n, n];
    let (p0_block, ceiling_block) = (0, 1);
    let vertices = regions.initial_box.vertices();
    let mut vertex_blocks = Vec::new();
    let mut delta_block = None;
    if literal.is_some() {
        vertex_blocks.push(psd.len());
        psd.push(n);
        delta_block = Some(psd.len());
        psd.push(n);
    } else {
        for _ in &vertices {
            vertex_blocks.push(psd.len());
            psd.push(n);
        }
    }
    let gram_block = psd.len();
    psd.push(order * gram_basis.len());
    let mut mult_blocks = Vec::new();
    if !mult_basis.is_empty() {
        for _ in 0..n {
            mult_blocks.push(psd.len());
            psd.push(order * mult_basis.len());
        }
    }
    let mut alpha_blocks = Vec::new();
    for _ in 0..(if opts.d_alpha > 0 { t_count } else { 0 }) {
        alpha_blocks.push(psd.len());
        psd.push(alpha_basis.len());
    }
    let cones = ConeLayout { free, nonneg, psd };
    let dim = cones.dim();
    let kcol = |s: usize, c: usize, mu: usize| kbar_col + (s * n + c) * k_basis.len() + mu;

    let mut bld = Builder {
        cones: &cones,
        rows: Vec::new(),
        rhs: Vec::new(),
    };
    let lm = opts.lambda_min;

    // Ceiling: C + P0 = (p_max - lambda_min) I.
    for j in 0..n {
        for i in 0..=j {
            let row = vec![bld.sym(ceiling_block, i, j, 1.0), bld.sym(p0_block, i, j, 1.0)];
            let r = if i == j { opts.p_max - lm } else { 0.0 };
            bld.push(row, r);
        }
    }
    // Initial set: W - P0 + eta_bar v v^T = lambda_min I.
    let eta_vectors: Vec<Vec<f64>> = match &literal {
        Some((z, _)) => vec![z.clone()],
        None => vertices.clone(),
    };
    for (v, &blk) in eta_vectors.iter().zip(&vertex_blocks) {
        for j in 0..n {
            for i in 0..=j {
                let mut row = vec![bld.sym(blk, i, j, 1.0), bld.sym(p0_block, i, j, -1.0)];
                row.push((eta_col, v[i] * v[j]));
                bld.push(row, if i == j { lm } else { 0.0 });
            }
        }
    }
    if let (Some((_, zd)), Some(db), Some(dc), Some(gc)) = (&literal, delta_block, delta_col, gap_col) {
        // Y = delta_bar z z^T - Pb:  Y - delta_bar z z^T + P0 = -lambda_min I.
        for j in 0..n {
            for i in 0..=j {
                let row = vec![bld.sym(db, i, j, 1.0), (dc, -zd[i] * zd[j]), bld.sym(p0_block, i, j, 1.0)];
                bld.push(row, if i == j { -lm } else { 0.0 });
            }
        }
        // eta_bar - delta_bar - s = 1e-6 keeps eta < delta.
        bld.push(vec![(eta_col, 1.0), (dc, -1.0), (gc, -1.0)], 1e-6);
    }

    // Coefficient matching for M(x).
    let scale = blocks.iter().map(|b| b.matrix.amax()).fold(1.0, f64::max);
    let margin = opts.margin_rel * scale;
    let pairs: Vec<(usize, usize)> = (0..order).flat_map(|b| (0..=b).map(move |a| (a, b))).collect();
    let pair_idx = |a: usize, b: usize| -> usize {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        b * (b + 1) / 2 + a
    };
    let nt = targets.len();
    let mut eqs: Vec<Eq> = vec![Eq::default(); pairs.len() * nt];
    let at = |a: usize, b: usize, mon: &Monomial| -> usize {
        pair_idx(a, b) * nt + target_idx[mon]
    };
    let zero = Monomial::one(n);

    // -k Pb and -Pb/(1+r) blocks.
    for (off, w) in [(0usize, -opts.kappa), (n + l + q, -1.0 / (1.0 + opts.rho))] {
        for j in 0..n {
            for i in 0..=j {
                let e = &mut eqs[at(off + i, off + j, &zero)];
                if i == j {
                    e.constant += w * lm;
                }
                let (c, f) = entry(&cones, p0_block, i, j);
                e.vars.push((c, w * f));
            }
        }
    }
    // Lb(x) in rows n.., columns n+l+q.. (upper triangle).
    for c in 0..n {
        let col = n + l + q + c;
        for r in 0..l {
            for s in 0..n {
                for (coef, mon) in jac.get(r, s).terms() {
                    let e = &mut eqs[at(n + r, col, mon)];
                    if s == c {
                        e.constant += coef * lm;
                    }
                    let (pc, f) = entry(&cones, p0_block, s, c);
                    e.vars.push((pc, coef * f));
                }
            }
        }
        for r in 0..q {
            for s in 0..m {
                for (coef, gm) in g.get(r, s).terms() {
                    for (mu, km) in k_basis.iter().enumerate() {
                        let e = &mut eqs[at(n + l + r, col, &gm.mul(km))];
                        e.vars.push((kcol(s, c, mu), *coef));
                    }
                }
            }
        }
    }
    // -sum_j a_j(x) pad(R_j).
    for (j, blk) in blocks.iter().enumerate() {
        for b in 0..nlq {
            for a in 0..=b {
                let r = blk.matrix[(a, b)];
                if r == 0.0 {
                    continue;
                }
                if let Some(ac) = alpha_col {
                    eqs[at(a, b, &zero)].vars.push((ac + j, -r));
                } else {
                    for (p, mp) in alpha_basis.iter().enumerate() {
                        for (s, ms) in alpha_basis.iter().enumerate() {
                            let (col, f) = entry(&cones, alpha_blocks[j], p, s);
                            eqs[at(a, b, &mp.mul(ms))].vars.push((col, -r * f));
                        }
                    }
                }
            }
        }
    }
    // Gram form.
    let (lo, hi) = (regions.state_box.lo().to_vec(), regions.state_box.hi().to_vec());
    let basis_scale = basis_scale(opts.domain, &lo, &hi);
    let gb = gram_basis.len();
    for &(a, b) in &pairs {
        for (i, mi) in gram_basis.iter().enumerate() {
            for (j, mj) in gram_basis.iter().enumerate() {
                let (col, f) = entry(&cones, gram_block, a * gb + i, b * gb + j);
                let mon = mi.mul(mj);
                eqs[at(a, b, &mon)].vars.push((col, f / scale_of(&mon, &basis_scale)));
            }
        }
    }
    // Box multipliers sigma_k(x, y) g_k(x).
    let mb = mult_basis.len();
    for (k, &blk) in mult_blocks.iter().enumerate() {
        let gk = box_poly(n, k, lo[k], hi[k], basis_scale[k]);
        for &(a, b) in &pairs {
            for (i, mi) in mult_basis.iter().enumerate() {
                for (j, mj) in mult_basis.iter().enumerate() {
                    let (col, f) = entry(&cones, blk, a * mb + i, b * mb + j);
                    let base = mi.mul(mj);
                    let w = f / scale_of(&base, &basis_scale);
                    for (gc, gm) in gk.terms() {
                        eqs[at(a, b, &base.mul(gm))].vars.push((col, gc * w));
                    }
                }
            }
        }
    }
    let matching_rows = eqs.len();
    for (p, &(a, b)) in pairs.iter().enumerate() {
        for t in 0..nt {
            let e = std::mem::take(&mut eqs[p * nt + t]);
            let mut rhs = -e.constant;
            if a == b && t == 0 {
                rhs -= margin;
            }
            bld.push(e.vars, rhs);
        }
    }

    let (rows, rhs) = (bld.rows, bld.rhs);
    let mut a_mat = SparseRows::new(rows.len(), dim);
    a_mat.rows = rows;
    let mut c = vec![0.0; dim];
    c[eta_col] = -1.0;
    let program = ConicProgram::new(c, a_mat, rhs, cones.clone())?;

    let note = literal.as_ref().and_then(|_| {
        (n >= 2).then(|| {
            "literal unsafe-set containment requires a full-rank Pb below a rank-one matrix; infeasible for n >= 2"
                .to_string()
        })
    });
    let exps = |v: &[Monomial]| v.iter().map(|m| m.exponents().to_vec()).collect::<Vec<_>>();
    let layout = VarLayout {
        n,
        m,
        l,
        q,
        order,
        blocks_t: t_count,
        margin,
        options: opts.clone(),
        k_basis: exps(&k_basis),
        gram_basis: exps(&gram_basis),
        mult_basis: exps(&mult_basis),
        alpha_basis: exps(&alpha_basis),
        state_lo: lo,
        state_hi: hi,
        basis_scale,
        vertices: eta_vectors,
        kbar_col,
        eta_col,
        delta_col,
        alpha_col,
        gap_col,
        p0_block,
        ceiling_block,
        vertex_blocks,
        delta_block,
        gram_block,
        mult_blocks,
        alpha_blocks,
        matching_rows,
        note,
    };
    Ok(SdpProblem {
        program,
        layout,
        jac: jac.clone(),
        g: g.clone(),
        blocks: blocks.iter().map(|b| b.matrix.clone()).collect(),
    })
}

/// `(x_k - lo)(hi - x_k) / s^2`.
fn box_poly(n: usize, k: usize, lo: f64, hi: f64, s: f64) -> Poly {
    let xk = Poly::var(n, k);
    xk.sub(&Poly::constant(n, lo)).mul(&Poly::constant(n, hi).sub(&xk)).scale(1.0 / (s * s))
}

/// Per-coordinate magnitude of the state box; ones when certifying globally.
fn basis_scale(domain: SosDomain, lo: &[f64], hi: &[f64]) -> Vec<f64> {
    lo.iter()
        .zip(hi)
        .map(|(a, b)| {
            let s = a.abs().max(b.abs());
            if domain == SosDomain::Box && s.is_finite() && s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect()
}

/// `s^e` for a monomial `x^e`.
fn scale_of(m: &Monomial, s: &[f64]) -> f64 {
    m.exponents().iter().zip(s).map(|(&e, v)| v.powi(e as i32)).product()
}

fn budget_error(jac: &PolyMatrix, g: &PolyMatrix, opts: &CompileOptions, n: usize, h: u32) -> SosError {
    let mut worst: Option<Monomial> = None;
    let mut consider = |m: Monomial| {
        if m.degree() > 2 * h && worst.as_ref().is_none_or(|w| m.degree() > w.degree()) {
            worst = Some(m);
        }
    };
    for i in 0..jac.rows() {
        for j in 0..jac.cols() {
            jac.get(i, j).terms().iter().for_each(|t| consider(t.1.clone()));
        }
    }
    let top_k = monomials_up_to(n, opts.d_k, opts.d_k);
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            for (_, gm) in g.get(i, j).terms() {
                top_k.iter().for_each(|k| consider(gm.mul(k)));
            }
        }
    }
    monomials_up_to(n, opts.d_alpha, opts.d_alpha).into_iter().for_each(&mut consider);
    let m = worst.unwrap_or_else(|| Monomial::one(n));
    SosError::DegreeBudget {
        monomial: m.to_string(),
        needed: m.degree(),
        budget: 2 * h,
    }
}

fn smat_block(program: &ConicProgram, block: usize, x: &[f64]) -> DMatrix<f64> {
    let k = program.cones.psd[block];
    let off = program.cones.psd_offset(block);
    crate::sdpsolve::smat(&x[off..off + k * (k + 1) / 2], k)
}

impl SdpProblem {
    /// `Pb = lambda_min I + P0`.
    pub fn pbar(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.layout.n;
        smat_block(&self.program, self.layout.p0_block, x) + DMatrix::identity(n, n) * self.layout.options.lambda_min
    }

    pub fn eta_bar(&self, x: &[f64]) -> f64 {
        x[self.layout.eta_col]
    }

    /// `Kb(x)` as an `m x n` polynomial matrix.
    pub fn kbar(&self, x: &[f64]) -> PolyMatrix {
        let ly = &self.layout;
        let mut k = PolyMatrix::zeros(ly.m, ly.n, ly.n);
        for s in 0..ly.m {
            for c in 0..ly.n {
                let terms = ly.k_basis.iter().enumerate().map(|(mu, e)| {
                    (x[ly.kbar_col + (s * ly.n + c) * ly.k_basis.len() + mu], mono(e))
                });
                k.set(s, c, Poly::from_terms(terms));
            }
        }
        k
    }

    /// The multipliers `a_j(x)`.
    pub fn alphas(&self, x: &[f64]) -> Vec<Poly> {
        let ly = &self.layout;
        let n = ly.n;
        (0..ly.blocks_t)
            .map(|j| match ly.alpha_col {
                Some(c) => Poly::constant(n, x[c + j]),
                None => {
                    let a = smat_block(&self.program, ly.alpha_blocks[j], x);
                    gram_poly(&a, &ly.alpha_basis, n)
                }
            })
            .collect()
    }

    /// `M(x)` for an assignment of the decision variables.
    pub fn matrix_polynomial(&self, x: &[f64]) -> PolyMatrix {
        let ly = &self.layout;
        let (n, l, q) = (ly.n, ly.l, ly.q);
        let nv = n;
        let pbar = self.pbar(x);
        let pb = PolyMatrix::from_constant(&pbar, nv);
        let mut mm = PolyMatrix::zeros(ly.order, ly.order, nv);
        let lam = self.jac.mul(&pb).expect("J conforms with Pb");
        let gk = self.g.mul(&self.kbar(x)).expect("G conforms with Kb");
        let lam = lam.vstack(&gk).expect("stack conforms");
        for i in 0..n {
            for j in 0..n {
                mm.set(i, j, Poly::constant(nv, -ly.options.kappa * pbar[(i, j)]));
                let off = n + l + q;
                mm.set(off + i, off + j, Poly::constant(nv, -pbar[(i, j)] / (1.0 + ly.options.rho)));
            }
        }
        for r in 0..l + q {
            for c in 0..n {
                mm.set(n + r, n + l + q + c, lam.get(r, c).clone());
                mm.set(n + l + q + c, n + r, lam.get(r, c).clone());
            }
        }
        for (a, blk) in self.alphas(x).iter().zip(&self.blocks) {
            let pad = PolyMatrix::from_constant(&pad_block(blk, ly.order), nv);
            let scaled = pad.mul_poly(a);
            mm = mm.add(&scaled.scale(-1.0)).expect("same shape");
        }
        mm
    }

    /// `-y^T (M(x) + tI) y` in variables `(x, y)`.
    pub fn constraint_poly(&self, x: &[f64]) -> Poly {
        let ly = &self.layout;
        let nt = ly.n + ly.order;
        let subs: Vec<Poly> = (0..ly.n).map(|i| Poly::var(nt, i)).collect();
        let mm = self.matrix_polynomial(x).substitute(&subs, nt).expect("substitution");
        let mut out = Poly::zero();
        for a in 0..ly.order {
            for b in 0..ly.order {
                let mut e = mm.get(a, b).clone();
                if a == b {
                    e = e.add(&Poly::constant(nt, ly.margin));
                }
                let yy = Poly::var(nt, ly.n + a).mul(&Poly::var(nt, ly.n + b));
                out = out.sub(&e.mul(&yy));
            }
        }
        out
    }

    /// Gram side `sum Q y m m + sum_k g_k sigma_k` in variables `(x, y)`.
    pub fn gram_side_poly(&self, x: &[f64]) -> Poly {
        let ly = &self.layout;
        let nt = ly.n + ly.order;
        let lift = |e: &Vec<u32>| {
            let mut v = e.clone();
            v.resize(nt, 0);
            Monomial::new(v)
        };
        let form = |block: usize, basis: &[Vec<u32>]| -> Poly {
            let w = |e: &Vec<u32>| 1.0 / scale_of(&mono(e), &ly.basis_scale);
            let qm = smat_block(&self.program, block, x);
            let k = basis.len();
            let mut terms = Vec::new();
            for a in 0..ly.order {
                for b in 0..ly.order {
                    for (i, mi) in basis.iter().enumerate() {
                        for (j, mj) in basis.iter().enumerate() {
                            let v = qm[(a * k + i, b * k + j)] * w(mi) * w(mj);
                            if v != 0.0 {
                                let mon = lift(mi).mul(&lift(mj)).mul(&Monomial::var(nt, ly.n + a)).mul(&Monomial::var(nt, ly.n + b));
                                terms.push((v, mon));
                            }
                        }
                    }
                }
            }
            Poly::from_terms(terms)
        };
        let mut out = form(ly.gram_block, &ly.gram_basis);
        for (k, &blk) in ly.mult_blocks.iter().enumerate() {
            let gk = box_poly(nt, k, ly.state_lo[k], ly.state_hi[k], ly.basis_scale[k]);
            out = out.add(&form(blk, &ly.mult_basis).mul(&gk));
        }
        out
    }

    /// Writes `program.txt` and `layout.json`.
    pub fn export(&self, dir: &Path) -> Result<(), SosError> {
        fs::create_dir_all(dir).map_err(|e| SosError::Io(e.to_string()))?;
        self.program.write(&dir.join("program.txt"))?;
        let js = serde_json::to_string_pretty(&self.layout).map_err(|e| SosError::Io(e.to_string()))?;
        fs::write(dir.join("layout.json"), js).map_err(|e| SosError::Io(e.to_string()))
    }

    /// Reads back the pair written by [`SdpProblem::export`].
    pub fn import_program(dir: &Path) -> Result<(ConicProgram, VarLayout), SosError> {
        let program = ConicProgram::read(&dir.join("program.txt"))?;
        let text = fs::read_to_string(dir.join("layout.json")).map_err(|e| SosError::Io(e.to_string()))?;
        let layout = serde_json::from_str(&text).map_err(|e| SosError::Io(e.to_string()))?;
        Ok((program, layout))
    }
}

/// `[[R, 0], [0, 0]]` of the given order.
pub fn pad_block(r: &DMatrix<f64>, order: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(order, order);
    out.view_mut((0, 0), (r.nrows(), r.ncols())).copy_from(r);
    out
}

/// `m(x)^T A m(x)`.
pub fn gram_poly(a: &DMatrix<f64>, basis: &[Vec<u32>], n: usize) -> Poly {
    let mut terms = Vec::new();
    for (i, mi) in basis.iter().enumerate() {
        for (j, mj) in basis.iter().enumerate() {
            terms.push((a[(i, j)], mono(mi).mul(&mono(mj))));
        }
    }
    let _ = n;
    Poly::from_terms(terms)
}

#[derive(Debug, Clone, PartialEq)]
pub enum SosOutcome {
    Certificate { gram: DMatrix<f64>, basis: Vec<Monomial> },
    Infeasible,
    Inconclusive(SolveStatus),
}

/// Least-norm correction of `gram` so that its expansion matches every
/// coefficient of `p` exactly: each coefficient's residual is spread evenly
/// over the entries whose monomial products hit it.
fn match_coefficients(gram: &mut DMatrix<f64>, basis: &[Monomial], p: &Poly) {
    let mut groups: HashMap<Monomial, Vec<(usize, usize)>> = HashMap::new();
    for (i, mi) in basis.iter().enumerate() {
        for (j, mj) in basis.iter().enumerate() {
            groups.entry(mi.mul(mj)).or_default().push((i, j));
        }
    }
    for (mono, cells) in groups {
        let have: f64 = cells.iter().map(|&(i, j)| gram[(i, j)]).sum();
        let fix = (p.coeff(&mono) - have) / cells.len() as f64;
        for (i, j) in cells {
            gram[(i, j)] += fix;
        }
    }
}

/// Searches for a Gram matrix of `p` (in `n` variables) over all monomials
/// up to half its degree.
pub fn sos_check(p: &Poly, n: usize, opts: &SolverOptions) -> Result<SosOutcome, SosError> {
    let d = p.degree();
    if d % 2 == 1 {
        return Err(SosError::OddDegree(d));
    }
    let basis = monomials_up_to(n, 0, d / 2);
    let targets = monomials_up_to(n, 0, d);
    let idx: HashMap<Monomial, usize> = targets.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
    let k = basis.len();
    let cones = ConeLayout {
        free: 0,
        nonneg: 0,
        psd: vec![k],
    };
    let mut rows = vec![Vec::new(); targets.len()];
    for (i, mi) in basis.iter().enumerate() {
        for (j, mj) in basis.iter().enumerate() {
            let (c, f) = entry(&cones, 0, i, j);
            rows[idx[&mi.mul(mj)]].push((c, f));
        }
    }
    for r in &mut rows {
        normalize_row(r);
    }
    let b: Vec<f64> = targets.iter().map(|t| p.coeff(t)).collect();
    let mut a = SparseRows::new(targets.len(), cones.dim());
    a.rows = rows;
    let program = ConicProgram::new(vec![0.0; cones.dim()], a, b, cones)?;
    let sol = solve(&program, opts)?;
    Ok(match sol.status {
        SolveStatus::Optimal => {
            let mut gram = crate::sdpsolve::smat(&sol.x, k);
            match_coefficients(&mut gram, &basis, p);
            if SymmetricEigen::new(gram.clone()).eigenvalues.min() < -opts.tol * gram.amax().max(1.0) {
                SosOutcome::Inconclusive(SolveStatus::Stalled)
            } else {
                SosOutcome::Certificate { gram, basis }
            }
        }
        SolveStatus::Infeasible => SosOutcome::Infeasible,
        s => SosOutcome::Inconclusive(s),
    })
}

/// Largest eigenvalue of `M(x)` at a point, for spot checks.
pub fn max_eig_at(problem: &SdpProblem, sol_x: &[f64], point: &[f64]) -> f64 {
    let mm = problem.matrix_polynomial(sol_x).eval(point).expect("point dimension");
    SymmetricEigen::new(mm).eigenvalues.max()
}

/// Box the multipliers certify over.
pub fn certified_box(layout: &VarLayout) -> Option<BoxSet> {
    (layout.options.domain == SosDomain::Box)
        .then(|| BoxSet::new(layout.state_lo.clone(), layout.state_hi.clone()).ok())
        .flatten()
}
