use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::linalg::sym_eigen;
use crate::{Error, Result};

/// Real symmetric matrix stored as its packed upper triangle (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    order: usize,
    upper: Vec<f64>,
}

#[inline]
fn packed_len(order: usize) -> usize {
    order * (order + 1) / 2
}

impl SymMatrix {
    pub fn zeros(order: usize) -> Self {
        Self {
            order,
            upper: vec![0.0; packed_len(order)],
        }
    }

    pub fn identity(order: usize) -> Self {
        let mut m = Self::zeros(order);
        for i in 0..order {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn scaled_identity(order: usize, value: f64) -> Self {
        let mut m = Self::zeros(order);
        for i in 0..order {
            m.set(i, i, value);
        }
        m
    }

    /// Symmetric part `(X + X') / 2` of a square matrix.
    pub fn from_dmatrix(m: &DMatrix<f64>) -> Self {
        assert!(m.is_square(), "SymMatrix::from_dmatrix needs a square matrix");
        let order = m.nrows();
        let mut out = Self::zeros(order);
        for i in 0..order {
            for j in i..order {
                out.set(i, j, 0.5 * (m[(i, j)] + m[(j, i)]));
            }
        }
        out
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m.set(i, i, d);
        }
        m
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.upper[self.idx(i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        let k = self.idx(i, j);
        self.upper[k] = value;
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        debug_assert!(j < self.order);
        // Row i starts after order + (order - 1) + ... + (order - i + 1) entries.
        i * self.order - i * i.saturating_sub(1) / 2 + (j - i)
    }

    /// Packed upper triangle, row-major.
    pub fn packed(&self) -> &[f64] {
        &self.upper
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.order, self.order, |i, j| self.get(i, j))
    }

    /// Ascending eigenvalues.
    pub fn eigenvalues(&self) -> Vec<f64> {
        if self.order == 0 {
            return Vec::new();
        }
        sym_eigen(&self.to_dmatrix()).0.iter().copied().collect()
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues().last().copied().unwrap_or(f64::NEG_INFINITY)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().first().copied().unwrap_or(f64::INFINITY)
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            order: self.order,
            upper: self.upper.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &SymMatrix, factor: f64) {
        assert_eq!(self.order, other.order);
        for (a, b) in self.upper.iter_mut().zip(&other.upper) {
            *a += factor * b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.upper.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.upper.iter().all(|&v| v == 0.0)
    }
}

impl Serialize for SymMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        crate::linalg::to_rows(&self.to_dmatrix()).serialize(s)
    }
}

impl<'de> Deserialize<'de> for SymMatrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(serde::de::Error::custom("symmetric matrix must be square"));
        }
        let mut m = SymMatrix::zeros(n);
        for i in 0..n {
            for j in i..n {
                if rows[i][j].to_bits() != rows[j][i].to_bits() {
                    return Err(serde::de::Error::custom(format!("entry ({i},{j}) is not symmetric")));
                }
                m.set(i, j, rows[i][j]);
            }
        }
        Ok(m)
    }
}

/// Principal square root of a positive-semidefinite matrix.
///
/// Eigenvalues in `[-tolerance, 0)` are clamped to zero.
pub fn symmetric_sqrt(m: &SymMatrix, tolerance: f64) -> Result<SymMatrix> {
    if m.order() == 0 {
        return Ok(SymMatrix::zeros(0));
    }
    let (values, vectors) = sym_eigen(&m.to_dmatrix());
    let min = values.min();
    if min < -tolerance {
        return Err(Error::NotPsd { min_eigenvalue: min });
    }
    let root = values.map(|v| v.max(0.0).sqrt());
    let s = &vectors * DMatrix::from_diagonal(&root) * vectors.transpose();
    Ok(SymMatrix::from_dmatrix(&s))
}
