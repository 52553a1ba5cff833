//! Axis-aligned boxes and the region triple (state set, initial set,
//! unsafe set) of a safety specification.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegionError {
    #[error("box bounds invalid: {0}")]
    InvalidBox(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("initial box intersects unsafe box {0}")]
    Overlap(usize),
}

/// Closed box `[lo_1, hi_1] x ... x [lo_n, hi_n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl BoxSet {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self, RegionError> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(RegionError::InvalidBox(format!(
                "lo has {} entries, hi has {}",
                lo.len(),
                hi.len()
            )));
        }
        for (i, (a, b)) in lo.iter().zip(&hi).enumerate() {
            if !a.is_finite() || !b.is_finite() || a > b {
                return Err(RegionError::InvalidBox(format!("coordinate {i}: [{a}, {b}]")));
            }
        }
        Ok(Self { lo, hi })
    }

    /// `[lo, hi]^n`.
    pub fn cube(n: usize, lo: f64, hi: f64) -> Result<Self, RegionError> {
        Self::new(vec![lo; n], vec![hi; n])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (a, b))| *v >= *a && *v <= *b)
    }

    pub fn intersects(&self, other: &BoxSet) -> bool {
        self.dim() == other.dim()
            && (0..self.dim()).all(|i| self.lo[i] <= other.hi[i] && other.lo[i] <= self.hi[i])
    }

    /// The `2^n` corners (repeated when a side is degenerate).
    pub fn vertices(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        (0..1usize << n)
            .map(|mask| {
                (0..n)
                    .map(|i| if mask >> i & 1 == 1 { self.hi[i] } else { self.lo[i] })
                    .collect()
            })
            .collect()
    }

    /// `k` evenly spaced points per axis, row-major over coordinates.
    pub fn grid(&self, k: usize) -> Vec<Vec<f64>> {
        let n = self.dim();
        let axis: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                if k <= 1 {
                    vec![0.5 * (self.lo[i] + self.hi[i])]
                } else {
                    (0..k)
                        .map(|t| self.lo[i] + (self.hi[i] - self.lo[i]) * t as f64 / (k - 1) as f64)
                        .collect()
                }
            })
            .collect();
        let per = axis[0].len();
        let total = per.pow(n as u32);
        (0..total)
            .map(|mut idx| {
                let mut p = vec![0.0; n];
                for i in (0..n).rev() {
                    p[i] = axis[i][idx % per];
                    idx /= per;
                }
                p
            })
            .collect()
    }
}

/// State set, initial set and unsafe set (a union of boxes).
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSpec {
    pub state_box: BoxSet,
    pub initial_box: BoxSet,
    pub unsafe_boxes: Vec<BoxSet>,
    /// Vectors for the literal rank-one containments; only read in literal mode.
    pub z_eta: Option<Vec<f64>>,
    pub z_delta: Option<Vec<f64>>,
}

impl RegionSpec {
    pub fn new(
        state_box: BoxSet,
        initial_box: BoxSet,
        unsafe_boxes: Vec<BoxSet>,
    ) -> Result<Self, RegionError> {
        let n = state_box.dim();
        for b in std::iter::once(&initial_box).chain(&unsafe_boxes) {
            if b.dim() != n {
                return Err(RegionError::Dimension {
                    expected: n,
                    got: b.dim(),
                });
            }
        }
        for (k, u) in unsafe_boxes.iter().enumerate() {
            if u.intersects(&initial_box) {
                return Err(RegionError::Overlap(k));
            }
        }
        Ok(Self {
            state_box,
            initial_box,
            unsafe_boxes,
            z_eta: None,
            z_delta: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.state_box.dim()
    }

    pub fn is_unsafe(&self, x: &[f64]) -> bool {
        self.unsafe_boxes.iter().any(|b| b.contains(x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vertices_and_grid() {
        let b = BoxSet::new(vec![0.0, -1.0], vec![1.0, 1.0]).unwrap();
        let v = b.vertices();
        assert_eq!(v.len(), 4);
        assert!(v.contains(&vec![1.0, -1.0]));
        let g = b.grid(3);
        assert_eq!(g.len(), 9);
        assert_eq!(g[0], vec![0.0, -1.0]);
        assert_eq!(g[1], vec![0.0, 0.0]);
        assert_eq!(g[8], vec![1.0, 1.0]);
    }

    #[test]
    fn overlap_rejected() {
        let x = BoxSet::cube(2, -10.0, 10.0).unwrap();
        let init = BoxSet::cube(2, -1.0, 1.0).unwrap();
        let bad = BoxSet::cube(2, 0.5, 3.0).unwrap();
        assert_eq!(
            RegionSpec::new(x, init, vec![bad]).unwrap_err(),
            RegionError::Overlap(0)
        );
        assert!(BoxSet::new(vec![1.0], vec![0.0]).is_err());
    }
}
