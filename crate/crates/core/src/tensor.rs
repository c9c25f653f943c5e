//! Dense row-major matrices and the handful of vector kernels the model needs.
//!
//! All arithmetic is `f64` with a fixed accumulation order, and the
//! transcendental functions come from `libm`, so results are bitwise
//! reproducible across runs and platforms.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Error, Result};

/// Dense row-major `f64` matrix whose entries are always finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::from_vec(raw.rows, raw.cols, raw.data)
    }
}

impl Matrix {
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
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting length mismatches and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err!(
                "{} values cannot fill a {}x{} matrix",
                data.len(),
                rows,
                cols
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Matrix::from_vec"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(shape_err!("row {} has {} columns, expected {}", i, r.len(), cols));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::from_vec(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Matrix product, accumulating over the inner index in ascending order.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(shape_err!(
                "cannot multiply {}x{} by {}x{}",
                self.rows,
                self.cols,
                other.rows,
                other.cols
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let lhs = self.row(i);
            let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (j, d) in dst.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (k, a) in lhs.iter().enumerate() {
                    acc += a * other.data[k * other.cols + j];
                }
                *d = acc;
            }
        }
        out.check_finite("matmul")
    }

    /// `v · self` for a row vector `v`; same accumulation order as [`Matrix::matmul`].
    pub fn vec_mul(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(shape_err!(
                "cannot multiply length-{} vector by {}x{}",
                v.len(),
                self.rows,
                self.cols
            ));
        }
        let mut out = vec![0.0; self.cols];
        for (j, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, a) in v.iter().enumerate() {
                acc += a * self.data[k * self.cols + j];
            }
            *o = acc;
        }
        if out.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("vec_mul"));
        }
        Ok(out)
    }

    pub(crate) fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax_row(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(shape_err!("softmax of an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax_row input"));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| libm::exp(x - max)).collect();
    let sum: f64 = out.iter().sum();
    for o in &mut out {
        *o /= sum;
    }
    Ok(out)
}

/// Indices of the `k` largest values in descending value order. Equal values
/// are ordered by ascending index, so the lowest index wins every tie.
pub fn topk_indices(v: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > v.len() {
        return Err(param_err!("k = {} outside 1..={}", k, v.len()));
    }
    let mut picked: Vec<usize> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for (i, &x) in v.iter().enumerate() {
            if picked.contains(&i) {
                continue;
            }
            match best {
                Some(b) if v[b] >= x => {}
                _ => best = Some(i),
            }
        }
        // k <= len guarantees a candidate remains
        picked.push(best.unwrap_or_default());
    }
    Ok(picked)
}

/// Index of the largest value; lowest index on ties. `None` for empty input.
pub fn argmax(v: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in v.iter().enumerate() {
        match best {
            Some(b) if v[b] >= x => {}
            _ => best = Some(i),
        }
    }
    best
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// Parameter-free layer norm: zero mean, unit variance.
pub fn layer_norm(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
    v.iter().map(|x| (x - mean) * inv).collect()
}

pub fn layer_norm_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let normed = layer_norm(m.row(i));
        out.row_mut(i).copy_from_slice(&normed);
    }
    out
}
