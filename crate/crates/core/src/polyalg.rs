//! Monomials, monomial dictionaries and polynomial matrices.
//!
//! Coefficients are `f64`. Every polynomial is kept in canonical form: terms
//! sorted by monomial order, no zero coefficients, no repeated monomials.
//! The monomial order is graded: lower total degree first, ties broken by
//! descending lexicographic comparison of exponent vectors (so `x1` precedes
//! `x2`, and `x1^2` precedes `x1*x2`).

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolyError {
    #[error("invalid dictionary request: {0}")]
    InvalidRequest(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("basis contains a constant monomial at index {0}")]
    ConstantMonomial(usize),
    #[error("duplicate monomial {0} in basis")]
    Duplicate(String),
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// A monomial `x^α` given by its exponent vector.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Monomial {
    exps: Vec<u32>,
}

impl Monomial {
    pub fn new(exps: Vec<u32>) -> Self {
        Self { exps }
    }

    pub fn one(n: usize) -> Self {
        Self { exps: vec![0; n] }
    }

    pub fn var(n: usize, i: usize) -> Self {
        let mut exps = vec![0; n];
        exps[i] = 1;
        Self { exps }
    }

    pub fn exponents(&self) -> &[u32] {
        &self.exps
    }

    pub fn nvars(&self) -> usize {
        self.exps.len()
    }

    pub fn degree(&self) -> u32 {
        self.exps.iter().sum()
    }

    pub fn is_constant(&self) -> bool {
        self.exps.iter().all(|&e| e == 0)
    }

    pub fn mul(&self, other: &Monomial) -> Monomial {
        assert_eq!(self.nvars(), other.nvars(), "monomial arity mismatch");
        Monomial {
            exps: self.exps.iter().zip(&other.exps).map(|(a, b)| a + b).collect(),
        }
    }

    /// `self / other` when `other` divides `self`.
    pub fn div(&self, other: &Monomial) -> Option<Monomial> {
        let mut exps = Vec::with_capacity(self.exps.len());
        for (a, b) in self.exps.iter().zip(&other.exps) {
            if b > a {
                return None;
            }
            exps.push(a - b);
        }
        Some(Monomial { exps })
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.exps
            .iter()
            .zip(x)
            .map(|(&e, &xi)| xi.powi(e as i32))
            .product()
    }
}

impl Ord for Monomial {
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree()
            .cmp(&other.degree())
            .then_with(|| other.exps.cmp(&self.exps))
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Monomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_constant() {
            return write!(f, "1");
        }
        let mut first = true;
        for (i, &e) in self.exps.iter().enumerate() {
            if e == 0 {
                continue;
            }
            if !first {
                write!(f, "*")?;
            }
            first = false;
            if e == 1 {
                write!(f, "x{}", i + 1)?;
            } else {
                write!(f, "x{}^{}", i + 1, e)?;
            }
        }
        Ok(())
    }
}

/// All exponent vectors of `n` variables with total degree exactly `d`,
/// in canonical order.
pub fn monomials_of_degree(n: usize, d: u32) -> Vec<Monomial> {
    fn rec(n: usize, i: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Monomial>) {
        if i + 1 == n {
            cur[i] = left;
            out.push(Monomial::new(cur.clone()));
            return;
        }
        for e in (0..=left).rev() {
            cur[i] = e;
            rec(n, i + 1, left - e, cur, out);
        }
        cur[i] = 0;
    }
    let mut out = Vec::new();
    if n == 0 {
        return out;
    }
    let mut cur = vec![0; n];
    rec(n, 0, d, &mut cur, &mut out);
    out
}

/// All monomials with `lo <= degree <= hi`, canonical order.
pub fn monomials_up_to(n: usize, lo: u32, hi: u32) -> Vec<Monomial> {
    (lo..=hi).flat_map(|d| monomials_of_degree(n, d)).collect()
}

/// An ordered list of distinct monomials in `n` variables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MonomialBasis {
    nvars: usize,
    entries: Vec<Monomial>,
}

impl MonomialBasis {
    /// Builds a basis keeping the given order. Rejects duplicates and
    /// arity mismatches.
    pub fn new(nvars: usize, entries: Vec<Monomial>) -> Result<Self, PolyError> {
        let mut seen = std::collections::HashSet::new();
        for m in &entries {
            if m.nvars() != nvars {
                return Err(PolyError::Dimension {
                    expected: nvars,
                    got: m.nvars(),
                });
            }
            if !seen.insert(m.clone()) {
                return Err(PolyError::Duplicate(m.to_string()));
            }
        }
        Ok(Self { nvars, entries })
    }

    /// Same monomials, canonical order.
    pub fn sorted(&self) -> Self {
        let mut entries = self.entries.clone();
        entries.sort();
        Self {
            nvars: self.nvars,
            entries,
        }
    }

    pub fn is_canonical(&self) -> bool {
        self.entries.windows(2).all(|w| w[0] < w[1])
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Monomial] {
        &self.entries
    }

    pub fn position(&self, m: &Monomial) -> Option<usize> {
        self.entries.iter().position(|e| e == m)
    }

    pub fn max_degree(&self) -> u32 {
        self.entries.iter().map(Monomial::degree).max().unwrap_or(0)
    }

    /// True when no entry is the constant monomial.
    pub fn is_state_dictionary(&self) -> bool {
        self.entries.iter().all(|m| !m.is_constant())
    }

    /// Text form: one monomial per line as space-separated exponents.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for m in &self.entries {
            let line: Vec<String> = m.exps.iter().map(|e| e.to_string()).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    /// Parses the text form. Blank lines and lines starting with `#` are
    /// skipped. The first monomial fixes the variable count.
    pub fn from_text(text: &str) -> Result<Self, PolyError> {
        let mut entries = Vec::new();
        let mut nvars = None;
        for (k, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let exps: Result<Vec<u32>, _> = line.split_whitespace().map(str::parse).collect();
            let exps = exps.map_err(|e| PolyError::Parse {
                line: k + 1,
                msg: e.to_string(),
            })?;
            let n = *nvars.get_or_insert(exps.len());
            if exps.len() != n {
                return Err(PolyError::Parse {
                    line: k + 1,
                    msg: format!("expected {n} exponents, got {}", exps.len()),
                });
            }
            entries.push(Monomial::new(exps));
        }
        let n = nvars.ok_or(PolyError::Parse {
            line: 0,
            msg: "empty dictionary".into(),
        })?;
        if n == 0 {
            return Err(PolyError::Parse {
                line: 0,
                msg: "zero variables".into(),
            });
        }
        Self::new(n, entries)
    }
}

/// All monomials of total degree `1..=max_degree` in `n` variables.
pub fn make_dictionary(n: usize, max_degree: u32) -> Result<MonomialBasis, PolyError> {
    if n == 0 {
        return Err(PolyError::InvalidRequest("n must be at least 1".into()));
    }
    if max_degree == 0 {
        return Err(PolyError::InvalidRequest(
            "max_degree must be at least 1".into(),
        ));
    }
    Ok(MonomialBasis {
        nvars: n,
        entries: monomials_up_to(n, 1, max_degree),
    })
}

/// Evaluates every monomial of `basis` at `x`.
pub fn eval_basis(basis: &MonomialBasis, x: &[f64]) -> Result<DVector<f64>, PolyError> {
    if x.len() != basis.nvars {
        return Err(PolyError::Dimension {
            expected: basis.nvars,
            got: x.len(),
        });
    }
    Ok(DVector::from_iterator(
        basis.len(),
        basis.entries.iter().map(|m| m.eval(x)),
    ))
}

/// Scalar polynomial in canonical form.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Poly {
    terms: Vec<(f64, Monomial)>,
}

impl Poly {
    pub fn zero() -> Self {
        Self { terms: Vec::new() }
    }

    pub fn constant(n: usize, c: f64) -> Self {
        Self::from_terms(vec![(c, Monomial::one(n))])
    }

    pub fn monomial(c: f64, m: Monomial) -> Self {
        Self::from_terms(vec![(c, m)])
    }

    pub fn var(n: usize, i: usize) -> Self {
        Self::monomial(1.0, Monomial::var(n, i))
    }

    /// Collects like terms and drops zeros.
    pub fn from_terms(terms: impl IntoIterator<Item = (f64, Monomial)>) -> Self {
        let mut acc: BTreeMap<Monomial, f64> = BTreeMap::new();
        for (c, m) in terms {
            *acc.entry(m).or_insert(0.0) += c;
        }
        Self {
            terms: acc.into_iter().filter(|(_, c)| *c != 0.0).map(|(m, c)| (c, m)).collect(),
        }
    }

    pub fn terms(&self) -> &[(f64, Monomial)] {
        &self.terms
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn degree(&self) -> u32 {
        self.terms.iter().map(|(_, m)| m.degree()).max().unwrap_or(0)
    }

    pub fn coeff(&self, m: &Monomial) -> f64 {
        self.terms
            .iter()
            .find(|(_, t)| t == m)
            .map(|(c, _)| *c)
            .unwrap_or(0.0)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|(c, m)| c * m.eval(x)).sum()
    }

    pub fn add(&self, other: &Poly) -> Poly {
        Poly::from_terms(self.terms.iter().chain(&other.terms).cloned())
    }

    pub fn sub(&self, other: &Poly) -> Poly {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, s: f64) -> Poly {
        Poly::from_terms(self.terms.iter().map(|(c, m)| (c * s, m.clone())))
    }

    pub fn mul(&self, other: &Poly) -> Poly {
        Poly::from_terms(
            self.terms
                .iter()
                .flat_map(|(a, ma)| other.terms.iter().map(move |(b, mb)| (a * b, ma.mul(mb)))),
        )
    }

    pub fn pow(&self, e: u32, n: usize) -> Poly {
        let mut out = Poly::constant(n, 1.0);
        for _ in 0..e {
            out = out.mul(self);
        }
        out
    }

    /// Replaces variable `i` by `subs[i]` for every `i`. The substitutes
    /// share a common variable count `n_new`.
    pub fn substitute(&self, subs: &[Poly], n_new: usize) -> Poly {
        let mut out = Poly::zero();
        for (c, m) in &self.terms {
            let mut t = Poly::constant(n_new, *c);
            for (i, &e) in m.exponents().iter().enumerate() {
                if e > 0 {
                    t = t.mul(&subs[i].pow(e, n_new));
                }
            }
            out = out.add(&t);
        }
        out
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.terms.iter().map(|(c, _)| c.abs()).fold(0.0, f64::max)
    }
}

impl fmt::Display for Poly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        for (k, (c, m)) in self.terms.iter().enumerate() {
            if k > 0 {
                write!(f, " + ")?;
            }
            if m.is_constant() {
                write!(f, "{c}")?;
            } else {
                write!(f, "{c}*{m}")?;
            }
        }
        Ok(())
    }
}

/// Dense matrix of polynomials, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyMatrix {
    rows: usize,
    cols: usize,
    nvars: usize,
    cells: Vec<Poly>,
}

impl PolyMatrix {
    pub fn zeros(rows: usize, cols: usize, nvars: usize) -> Self {
        Self {
            rows,
            cols,
            nvars,
            cells: vec![Poly::zero(); rows * cols],
        }
    }

    pub fn identity(k: usize, nvars: usize) -> Self {
        let mut m = Self::zeros(k, k, nvars);
        for i in 0..k {
            m.set(i, i, Poly::constant(nvars, 1.0));
        }
        m
    }

    /// Constant polynomial matrix from a numeric one.
    pub fn from_constant(a: &DMatrix<f64>, nvars: usize) -> Self {
        let mut m = Self::zeros(a.nrows(), a.ncols(), nvars);
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                m.set(i, j, Poly::constant(nvars, a[(i, j)]));
            }
        }
        m
    }

    /// Column vector of the basis monomials.
    pub fn from_basis(basis: &MonomialBasis) -> Self {
        let mut m = Self::zeros(basis.len(), 1, basis.nvars());
        for (i, mono) in basis.entries().iter().enumerate() {
            m.set(i, 0, Poly::monomial(1.0, mono.clone()));
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn get(&self, i: usize, j: usize) -> &Poly {
        &self.cells[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, p: Poly) {
        self.cells[i * self.cols + j] = p;
    }

    pub fn degree(&self) -> u32 {
        self.cells.iter().map(Poly::degree).max().unwrap_or(0)
    }

    pub fn eval(&self, x: &[f64]) -> Result<DMatrix<f64>, PolyError> {
        if x.len() != self.nvars {
            return Err(PolyError::Dimension {
                expected: self.nvars,
                got: x.len(),
            });
        }
        Ok(DMatrix::from_fn(self.rows, self.cols, |i, j| self.get(i, j).eval(x)))
    }

    fn check_same(&self, other: &PolyMatrix) -> Result<(), PolyError> {
        if self.rows != other.rows {
            return Err(PolyError::Dimension {
                expected: self.rows,
                got: other.rows,
            });
        }
        if self.cols != other.cols {
            return Err(PolyError::Dimension {
                expected: self.cols,
                got: other.cols,
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &PolyMatrix) -> Result<PolyMatrix, PolyError> {
        self.check_same(other)?;
        Ok(PolyMatrix {
            rows: self.rows,
            cols: self.cols,
            nvars: self.nvars,
            cells: self.cells.iter().zip(&other.cells).map(|(a, b)| a.add(b)).collect(),
        })
    }

    pub fn scale(&self, s: f64) -> PolyMatrix {
        PolyMatrix {
            rows: self.rows,
            cols: self.cols,
            nvars: self.nvars,
            cells: self.cells.iter().map(|p| p.scale(s)).collect(),
        }
    }

    /// Every entry multiplied by the scalar polynomial `p`.
    pub fn mul_poly(&self, p: &Poly) -> PolyMatrix {
        PolyMatrix {
            rows: self.rows,
            cols: self.cols,
            nvars: self.nvars,
            cells: self.cells.iter().map(|c| c.mul(p)).collect(),
        }
    }

    pub fn mul(&self, other: &PolyMatrix) -> Result<PolyMatrix, PolyError> {
        if self.cols != other.rows {
            return Err(PolyError::Dimension {
                expected: self.cols,
                got: other.rows,
            });
        }
        let mut out = PolyMatrix::zeros(self.rows, other.cols, self.nvars);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut acc = Poly::zero();
                for k in 0..self.cols {
                    let a = self.get(i, k);
                    let b = other.get(k, j);
                    if !a.is_zero() && !b.is_zero() {
                        acc = acc.add(&a.mul(b));
                    }
                }
                out.set(i, j, acc);
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> PolyMatrix {
        let mut out = PolyMatrix::zeros(self.cols, self.rows, self.nvars);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j).clone());
            }
        }
        out
    }

    pub fn substitute(&self, subs: &[Poly], n_new: usize) -> Result<PolyMatrix, PolyError> {
        if subs.len() != self.nvars {
            return Err(PolyError::Dimension {
                expected: self.nvars,
                got: subs.len(),
            });
        }
        Ok(PolyMatrix {
            rows: self.rows,
            cols: self.cols,
            nvars: n_new,
            cells: self.cells.iter().map(|p| p.substitute(subs, n_new)).collect(),
        })
    }

    /// Stacks `self` above `other`.
    pub fn vstack(&self, other: &PolyMatrix) -> Result<PolyMatrix, PolyError> {
        if self.cols != other.cols {
            return Err(PolyError::Dimension {
                expected: self.cols,
                got: other.cols,
            });
        }
        let mut cells = self.cells.clone();
        cells.extend(other.cells.iter().cloned());
        Ok(PolyMatrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            nvars: self.nvars,
            cells,
        })
    }

    pub fn is_zero(&self) -> bool {
        self.cells.iter().all(Poly::is_zero)
    }

    /// Largest coefficient magnitude of `self - other`; zero means the two
    /// are identical after canonicalization.
    pub fn max_coeff_diff(&self, other: &PolyMatrix) -> Result<f64, PolyError> {
        let d = self.add(&other.scale(-1.0))?;
        Ok(d.cells.iter().map(Poly::max_abs_coeff).fold(0.0, f64::max))
    }
}

/// Factors a state dictionary as `F(x) = J(x) x`. Each monomial is charged
/// to the column of its lowest-index variable with a positive exponent.
pub fn factorize_dictionary(basis: &MonomialBasis) -> Result<PolyMatrix, PolyError> {
    let n = basis.nvars();
    let mut j = PolyMatrix::zeros(basis.len(), n, n);
    for (r, m) in basis.entries().iter().enumerate() {
        let col = m
            .exponents()
            .iter()
            .position(|&e| e > 0)
            .ok_or(PolyError::ConstantMonomial(r))?;
        let rest = m.div(&Monomial::var(n, col)).expect("positive exponent");
        j.set(r, col, Poly::monomial(1.0, rest));
    }
    Ok(j)
}
