//! Dense vector/matrix kernels shared by every other module.
//!
//! All similarity in this crate is cosine similarity, so embeddings and
//! prototypes are normalized onto the unit sphere before any dot product.

use crate::error::{CppError, Result};
use serde::{Deserialize, Serialize};

/// Dense vector of 64-bit reals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn from_vec(data: Vec<f64>) -> Self {
        Vector { data }
    }

    pub fn zeros(dim: usize) -> Self {
        Vector {
            data: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&self, s: f64) -> Vector {
        Vector {
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    pub fn add(&self, other: &Vector) -> Vector {
        debug_assert_eq!(self.dim(), other.dim());
        Vector {
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        debug_assert_eq!(self.dim(), other.dim());
        Vector {
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

/// Row-major dense matrix of 64-bit reals.
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(CppError::Shape(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_vector(&self, r: usize) -> Vector {
        Vector::from_vec(self.row(r).to_vec())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// a · b for a: m×k, b: k×n. Caller guarantees conformable shapes.
pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.cols(), b.rows());
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Matrix::zeros(m, n);
    for i in 0..m {
        for l in 0..k {
            let av = a.get(i, l);
            if av == 0.0 {
                continue;
            }
            let brow = b.row(l);
            let orow = out.row_mut(i);
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// aᵀ · b for a: k×m, b: k×n.
pub fn matmul_at_b(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.rows(), b.rows());
    let (k, m, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Matrix::zeros(m, n);
    for l in 0..k {
        let arow = a.row(l);
        let brow = b.row(l);
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let orow = out.row_mut(i);
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// a · bᵀ for a: m×k, b: n×k.
pub fn matmul_a_bt(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.cols(), b.cols());
    let (m, n) = (a.rows(), b.rows());
    let mut out = Matrix::zeros(m, n);
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            let brow = b.row(j);
            let mut acc = 0.0;
            for l in 0..arow.len() {
                acc += arow[l] * brow[l];
            }
            out.set(i, j, acc);
        }
    }
    out
}

/// Column sums, as a length-cols vector.
pub fn col_sums(a: &Matrix) -> Vector {
    let mut out = Vector::zeros(a.cols());
    for i in 0..a.rows() {
        let row = a.row(i);
        for j in 0..a.cols() {
            out[j] += row[j];
        }
    }
    out
}

/// Cosine similarity of two nonzero vectors, in [-1, 1].
pub fn cosine_sim(a: &Vector, b: &Vector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(CppError::Shape(format!(
            "cosine_sim dims {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Err(CppError::DegenerateVector(
            "cosine_sim of a zero vector".into(),
        ));
    }
    Ok(a.dot(b) / (na * nb))
}

/// log Σ exp(v_i), computed with a max shift so large entries do not overflow.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(CppError::EmptyInput("log_sum_exp of empty slice".into()));
    }
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Rescale to unit L2 norm.
pub fn l2_normalize(v: &Vector) -> Result<Vector> {
    let n = v.norm();
    if n == 0.0 {
        return Err(CppError::DegenerateVector(
            "l2_normalize of a zero vector".into(),
        ));
    }
    Ok(v.scale(1.0 / n))
}

/// Matrix of cosine similarities: entry (i, j) = cosine_sim(a[i], b[j]).
pub fn pairwise_cosine(a: &[Vector], b: &[Vector]) -> Result<Matrix> {
    let mut out = Matrix::zeros(a.len(), b.len());
    for (i, va) in a.iter().enumerate() {
        for (j, vb) in b.iter().enumerate() {
            out.set(i, j, cosine_sim(va, vb)?);
        }
    }
    Ok(out)
}
