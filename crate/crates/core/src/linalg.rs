//! Small dense containers used for curvature data.
//!
//! Dimensions never exceed about twenty, so everything is row-major `Vec<f64>`
//! with plain loops. Eigenvalues are delegated to faer.

use std::ops::{Index, IndexMut};

use faer::{Mat, Side};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Square dense matrix, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    dim: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            for j in 0..dim {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    /// Builds from nested rows, failing if they are ragged or not square.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Structural(format!(
                "matrix rows are not {dim}x{dim}"
            )));
        }
        Ok(Self::from_fn(dim, |i, j| rows[i][j]))
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self[(i, i)]).sum()
    }

    /// Sum of squared entries.
    pub fn frob2(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |a, x| a.max(x.abs()))
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.dim, |i, j| self[(j, i)])
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().map(|x| c * x).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        debug_assert_eq!(self.dim, other.dim);
        Self {
            dim: self.dim,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, c: f64, other: &Self) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn matmul(&self, other: &Self) -> Self {
        let d = self.dim;
        let mut out = Self::zeros(d);
        for i in 0..d {
            for k in 0..d {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..d {
                    out.data[i * d + j] += a * other.data[k * d + j];
                }
            }
        }
        out
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dim).map(|i| dot(self.row(i), x)).collect()
    }

    /// `x^T A x`.
    pub fn quad(&self, x: &[f64]) -> f64 {
        dot(x, &self.matvec(x))
    }

    /// Frobenius inner product `tr(A^T B)`.
    pub fn inner(&self, other: &Self) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn sym_part(&self) -> Self {
        Self::from_fn(self.dim, |i, j| 0.5 * (self[(i, j)] + self[(j, i)]))
    }

    /// Largest `|A_ij - A_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.dim {
            for j in 0..i {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// Eigenvalues of the symmetric part, ascending.
    pub fn sym_eigenvalues(&self) -> Result<Vec<f64>> {
        let s = self.sym_part();
        let m = Mat::<f64>::from_fn(self.dim, self.dim, |i, j| s[(i, j)]);
        m.self_adjoint_eigenvalues(Side::Lower)
            .map_err(|e| Error::Numeric(format!("symmetric eigensolver failed: {e:?}")))
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.dim + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.dim + j]
    }
}

/// Dense rank-4 array over `0..dim` in every slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    dim: usize,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; dim.pow(4)],
        }
    }

    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut t = Self::zeros(dim);
        for a in 0..dim {
            for b in 0..dim {
                for c in 0..dim {
                    for d in 0..dim {
                        t[(a, b, c, d)] = f(a, b, c, d);
                    }
                }
            }
        }
        t
    }

    pub fn from_nested(nested: &[Vec<Vec<Vec<f64>>>]) -> Result<Self> {
        let dim = nested.len();
        let ok = nested.iter().all(|x| {
            x.len() == dim
                && x.iter()
                    .all(|y| y.len() == dim && y.iter().all(|w| w.len() == dim))
        });
        if !ok {
            return Err(Error::Structural(format!("rank-4 array is not {dim}^4")));
        }
        Ok(Self::from_fn(dim, |a, b, c, d| nested[a][b][c][d]))
    }

    pub fn to_nested(&self) -> Vec<Vec<Vec<Vec<f64>>>> {
        let d = self.dim;
        (0..d)
            .map(|a| {
                (0..d)
                    .map(|b| {
                        (0..d)
                            .map(|c| (0..d).map(|e| self[(a, b, c, e)]).collect())
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn norm2(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |a, x| a.max(x.abs()))
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().map(|x| c * x).collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self {
            dim: self.dim,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub(crate) fn raw_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

impl Index<(usize, usize, usize, usize)> for Tensor4 {
    type Output = f64;
    fn index(&self, (a, b, c, d): (usize, usize, usize, usize)) -> &f64 {
        let m = self.dim;
        &self.data[((a * m + b) * m + c) * m + d]
    }
}

impl IndexMut<(usize, usize, usize, usize)> for Tensor4 {
    fn index_mut(&mut self, (a, b, c, d): (usize, usize, usize, usize)) -> &mut f64 {
        let m = self.dim;
        &mut self.data[((a * m + b) * m + c) * m + d]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
