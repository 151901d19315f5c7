//! Dense 2-D math and the probabilistic row operators used by the losses.
//!
//! Everything is `f64`; matrices are row-major.

use serde::{Deserialize, Serialize};

use crate::error::{OdmlError, Result};

/// Lower bound applied to the second KL argument inside the logarithm.
pub const KL_LOG_FLOOR: f64 = 1e-12;
/// Norm guard used by [`l2_normalize`] and the model's output normalization.
pub const NORM_EPS: f64 = 1e-12;

const DISTRIBUTION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(OdmlError::shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
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

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(OdmlError::shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, so zero-width matrices yield `rows` empty slices.
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(OdmlError::shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(OdmlError::shape(format!(
                "matmul_t {}x{} by ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(OdmlError::shape(format!(
                "t_matmul ({}x{})ᵀ by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let b = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &bv) in out_row.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self += s · other`
    pub fn add_scaled(&mut self, other: &Matrix, s: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(OdmlError::shape(format!(
                "add {:?} to {:?}",
                other.shape(),
                self.shape()
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Selects rows by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b).sqrt()
}

/// Scales `v` to unit length. Vectors with norm below [`NORM_EPS`] are
/// divided by `norm + NORM_EPS` instead, so the output stays finite.
pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    let denom = if n < NORM_EPS { n + NORM_EPS } else { n };
    v.iter().map(|x| x / denom).collect()
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(OdmlError::shape(format!(
            "cosine_sim on vectors of dim {} and {}",
            a.len(),
            b.len()
        )));
    }
    let s = dot(a, b) / (norm(a) * norm(b)).max(NORM_EPS);
    Ok(s.clamp(-1.0, 1.0))
}

/// Row-wise softmax, stabilized by subtracting each row's maximum.
pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    if !m.is_finite() {
        return Err(OdmlError::NonFinite("softmax input"));
    }
    let mut out = m.clone();
    for i in 0..out.rows {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Backpropagates `d_out` (gradient w.r.t. softmax output `sm`) to the logits.
pub fn softmax_rows_backward(sm: &Matrix, d_out: &Matrix) -> Result<Matrix> {
    if sm.shape() != d_out.shape() {
        return Err(OdmlError::shape("softmax backward shape mismatch"));
    }
    let mut out = Matrix::zeros(sm.rows, sm.cols);
    for i in 0..sm.rows {
        let s = sm.row(i);
        let d = d_out.row(i);
        let inner = dot(s, d);
        for ((o, &sv), &dv) in out.row_mut(i).iter_mut().zip(s).zip(d) {
            *o = sv * (dv - inner);
        }
    }
    Ok(out)
}

fn check_distributions(m: &Matrix) -> Result<()> {
    for (row, r) in m.iter_rows().enumerate() {
        let sum: f64 = r.iter().sum();
        if !sum.is_finite() || (sum - 1.0).abs() > DISTRIBUTION_TOL || r.iter().any(|&v| v < 0.0) {
            return Err(OdmlError::NotDistribution { row, sum });
        }
    }
    Ok(())
}

fn kl_term(p: f64, q: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * (p.ln() - q.max(KL_LOG_FLOOR).ln())
    }
}

/// Mean over rows of `KL(p_row ‖ q_row)`; the first argument is the target.
pub fn kl_rows(p: &Matrix, q: &Matrix) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(OdmlError::shape(format!(
            "kl_rows on {:?} and {:?}",
            p.shape(),
            q.shape()
        )));
    }
    check_distributions(p)?;
    check_distributions(q)?;
    if p.rows == 0 {
        return Ok(0.0);
    }
    let total: f64 = p.data.iter().zip(&q.data).map(|(&a, &b)| kl_term(a, b)).sum();
    Ok(total / p.rows as f64)
}

/// [`kl_rows`] together with its partial derivatives w.r.t. both arguments.
///
/// Entries of `q` at or below the log floor receive zero gradient, as do
/// zero entries of `p`.
pub fn kl_rows_with_grad(p: &Matrix, q: &Matrix) -> Result<(f64, Matrix, Matrix)> {
    let value = kl_rows(p, q)?;
    let n = p.rows.max(1) as f64;
    let mut dp = Matrix::zeros(p.rows, p.cols);
    let mut dq = Matrix::zeros(p.rows, p.cols);
    for (k, (&a, &b)) in p.data.iter().zip(&q.data).enumerate() {
        if a > 0.0 {
            dp.data[k] = (a.ln() - b.max(KL_LOG_FLOOR).ln() + 1.0) / n;
        }
        if b > KL_LOG_FLOOR {
            dq.data[k] = -a / b / n;
        }
    }
    Ok((value, dp, dq))
}
