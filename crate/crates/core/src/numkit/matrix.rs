//! Row-major dense matrix and the small set of kernels built on it.

use super::{NumError, Result};
use rand::Rng;

/// Denominator guard for cosine similarity; keeps zero vectors NaN-free.
pub const COSINE_EPS: f64 = 1e-8;

/// Dense row-major matrix of `f64` values.
#[derive(Clone, Debug, PartialEq)]
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
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(NumError::Dim(format!(
                "data length {} != {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(NumError::Dim("ragged row lengths".into()));
        }
        Ok(Matrix {
            rows: r,
            cols: c,
            data: rows.concat(),
        })
    }

    /// Uniform values in `[-bound, bound]` from the given generator.
    pub fn uniform<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        Matrix { rows, cols, data }
    }

    /// Glorot-style init: uniform in `[-s, s]` with `s = sqrt(6/(fan_in+fan_out))`.
    pub fn glorot<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Matrix::uniform(fan_in, fan_out, s, rng)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a * b)
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(NumError::Dim(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(NumError::Dim(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Mean of each column as a length-`cols` vector.
    pub fn col_mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.cols];
        for i in 0..self.rows {
            for j in 0..self.cols {
                mean[j] += self.data[i * self.cols + j];
            }
        }
        let n = self.rows.max(1) as f64;
        for v in &mut mean {
            *v /= n;
        }
        mean
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Standard matrix product with deterministic row-major accumulation.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(NumError::Dim(format!(
            "matmul {}x{} . {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

/// Row-wise softmax of `m / temperature`, computed with max-subtraction.
pub fn softmax_rows(m: &Matrix, temperature: f64) -> Result<Matrix> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(NumError::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let mut out = m.clone();
    for i in 0..out.rows {
        let row = out.row_mut(i);
        let max = row
            .iter()
            .map(|v| v / temperature)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v / temperature - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Pairwise cosine similarity between the rows of `a` (LxD) and `b` (PxD),
/// yielding an LxP matrix. Denominators are guarded by [`COSINE_EPS`] so zero
/// rows produce 0.0 rather than NaN.
pub fn cosine_similarity(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(NumError::Dim(format!(
            "cosine_similarity inner dims {} vs {}",
            a.cols, b.cols
        )));
    }
    let norm = |row: &[f64]| row.iter().map(|v| v * v).sum::<f64>().sqrt();
    let a_norms: Vec<f64> = (0..a.rows).map(|i| norm(a.row(i))).collect();
    let b_norms: Vec<f64> = (0..b.rows).map(|j| norm(b.row(j))).collect();
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        for j in 0..b.rows {
            let dot: f64 = a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
            out.data[i * b.rows + j] = dot / (a_norms[i] * b_norms[j] + COSINE_EPS);
        }
    }
    Ok(out)
}
