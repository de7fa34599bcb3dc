//! Small dense linear algebra: row-major matrices, Cholesky, triangular solves.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-10;

/// Which triangle a triangular matrix occupies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Triangle {
    Lower,
    Upper,
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("matrix", "ragged rows"));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Row-major storage.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("{}x{} x {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for p in 0..self.cols {
                let a = self[(i, p)];
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(p, j)];
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::shape(
                "matvec",
                format!("{}x{} x {}", self.rows, self.cols, v.len()),
            ));
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn add_diagonal(&mut self, value: f64) {
        for i in 0..self.rows.min(self.cols) {
            self[(i, i)] += value;
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Largest asymmetry `|a_ij − a_ji|`, with its location.
    fn asymmetry(&self) -> (usize, usize, f64) {
        let mut worst = (0, 0, 0.0);
        for i in 0..self.rows {
            for j in 0..i {
                let gap = (self[(i, j)] - self[(j, i)]).abs();
                if gap > worst.2 {
                    worst = (i, j, gap);
                }
            }
        }
        worst
    }

    /// Lower Cholesky factor `L` with `L·Lᵀ = self`.
    ///
    /// ```
    /// use glrep::diff::Matrix;
    ///
    /// let a = Matrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap();
    /// let l = a.cholesky().unwrap();
    /// assert_eq!(l[(0, 0)], 2.0);
    /// assert_eq!(l[(1, 0)], 1.0);
    /// assert!((l[(1, 1)] - 2f64.sqrt()).abs() < 1e-15);
    /// ```
    pub fn cholesky(&self) -> Result<Matrix> {
        if !self.is_square() {
            return Err(Error::shape(
                "cholesky",
                format!("{}x{} is not square", self.rows, self.cols),
            ));
        }
        let scale = self.data.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let (row, col, gap) = self.asymmetry();
        if gap > SYMMETRY_TOL * scale {
            return Err(Error::NotSymmetric { row, col, gap });
        }
        let n = self.rows;
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut pivot = self[(j, j)];
            for k in 0..j {
                pivot -= l[(j, k)] * l[(j, k)];
            }
            if !(pivot > 0.0) {
                return Err(Error::NotPositiveDefinite { pivot: j });
            }
            let ljj = pivot.sqrt();
            l[(j, j)] = ljj;
            for i in j + 1..n {
                let mut s = self[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / ljj;
            }
        }
        Ok(l)
    }

    /// Solves `self · x = b` for triangular `self`; the other triangle is ignored.
    pub fn tri_solve(&self, b: &[f64], side: Triangle) -> Result<Vec<f64>> {
        if !self.is_square() || b.len() != self.rows {
            return Err(Error::shape(
                "tri_solve",
                format!("{}x{} with rhs of length {}", self.rows, self.cols, b.len()),
            ));
        }
        let n = self.rows;
        let mut x = b.to_vec();
        match side {
            Triangle::Lower => {
                for i in 0..n {
                    let mut s = x[i];
                    for k in 0..i {
                        s -= self[(i, k)] * x[k];
                    }
                    x[i] = div_pivot(s, self[(i, i)], i)?;
                }
            }
            Triangle::Upper => {
                for i in (0..n).rev() {
                    let mut s = x[i];
                    for k in i + 1..n {
                        s -= self[(i, k)] * x[k];
                    }
                    x[i] = div_pivot(s, self[(i, i)], i)?;
                }
            }
        }
        Ok(x)
    }

    /// Inverse of a triangular matrix, column by column.
    pub fn tri_inverse(&self, side: Triangle) -> Result<Matrix> {
        let n = self.rows;
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let col = self.tri_solve(&e, side)?;
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        Ok(inv)
    }

    /// Solves `A x = b` given the Cholesky factor `L` of `A` (i.e. `self = L`).
    pub fn cholesky_solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let y = self.tri_solve(b, Triangle::Lower)?;
        self.transpose().tri_solve(&y, Triangle::Upper)
    }
}

fn div_pivot(s: f64, pivot: f64, index: usize) -> Result<f64> {
    if pivot == 0.0 {
        Err(Error::Singular { index })
    } else {
        Ok(s / pivot)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}
