//! Dense row-major `f64` matrices.
//!
//! Vectors are stored as single-column matrices. Shape mismatches are
//! programming errors and panic; numerical failures (singular systems) are
//! reported through [`NumericsError`].

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::NumericsError;

/// Condition-number cap used by [`Tensor::inverse`].
pub const DEFAULT_CONDITION_CAP: f64 = 1e12;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: [usize; 2],
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        f.debug_list().entries(self.data.iter()).finish()
    }
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "shape mismatch: {rows}x{cols} tensor needs {} values, got {}",
            rows * cols,
            data.len()
        );
        Self { shape: [rows, cols], data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self::new(rows, cols, vec![value; rows * cols])
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(1, 1, vec![value])
    }

    /// Column vector.
    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(n, 1, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "shape mismatch: ragged rows");
            data.extend_from_slice(row);
        }
        Self::new(r, c, data)
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut t = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            t.data[i * n + i] = *v;
        }
        t
    }

    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.shape[1];
        self.data[r * cols + c] = v;
    }

    /// Value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.shape, [1, 1], "shape mismatch: item() on {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows()).map(|r| self.get(r, c)).collect()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        self.assert_same_shape(other, "elementwise op");
        Tensor {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub(crate) fn assert_same_shape(&self, other: &Tensor, what: &str) {
        assert_eq!(
            self.shape, other.shape,
            "shape mismatch in {what}: {:?} vs {:?}",
            self.shape, other.shape
        );
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        self.assert_same_shape(other, "add_assign");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn axpy(&mut self, alpha: f64, other: &Tensor) {
        self.assert_same_shape(other, "axpy");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn transpose(&self) -> Tensor {
        let [r, c] = self.shape;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(c, r, out)
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        gemm(self, false, other, false)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Tensor) -> Tensor {
        gemm(self, true, other, false)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Tensor) -> Tensor {
        gemm(self, false, other, true)
    }

    pub fn trace(&self) -> f64 {
        let [r, c] = self.shape;
        assert_eq!(r, c, "shape mismatch: trace of non-square {r}x{c}");
        (0..r).map(|i| self.data[i * c + i]).sum()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm1(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn norm2sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.norm2sq().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.assert_same_shape(other, "max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Maximum absolute column sum.
    pub fn induced_norm1(&self) -> f64 {
        let [r, c] = self.shape;
        (0..c)
            .map(|j| (0..r).map(|i| self.data[i * c + j].abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Inverse via LU with partial pivoting, with the default condition cap.
    pub fn inverse(&self) -> Result<Tensor, NumericsError> {
        self.inverse_capped(DEFAULT_CONDITION_CAP)
    }

    /// Inverse via LU with partial pivoting. Fails when the matrix is singular
    /// or its 1-norm condition estimate exceeds `cap`.
    pub fn inverse_capped(&self, cap: f64) -> Result<Tensor, NumericsError> {
        let [r, c] = self.shape;
        assert_eq!(r, c, "shape mismatch: inverse of non-square {r}x{c}");
        let m = self.to_nalgebra();
        let inv = m
            .lu()
            .try_inverse()
            .ok_or(NumericsError::Singular { condition: f64::INFINITY })?;
        let inv = Tensor::from_nalgebra(&inv);
        let condition = self.induced_norm1() * inv.induced_norm1();
        if !condition.is_finite() || condition > cap {
            return Err(NumericsError::Singular { condition });
        }
        Ok(inv)
    }

    pub fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.shape[0], self.shape[1], &self.data)
    }

    pub fn from_nalgebra(m: &DMatrix<f64>) -> Tensor {
        let (r, c) = m.shape();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(m[(i, j)]);
            }
        }
        Tensor::new(r, c, data)
    }

    /// Stack tensors with equal column counts vertically.
    pub fn concat_rows(parts: &[&Tensor]) -> Tensor {
        let cols = parts.first().map_or(0, |t| t.cols());
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            assert_eq!(p.cols(), cols, "shape mismatch: concat_rows column counts differ");
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Tensor::new(rows, cols, data)
    }

    /// Place column vectors side by side.
    pub fn from_columns(columns: &[&[f64]]) -> Tensor {
        let cols = columns.len();
        let rows = columns.first().map_or(0, |c| c.len());
        let mut t = Tensor::zeros(rows, cols);
        for (j, col) in columns.iter().enumerate() {
            assert_eq!(col.len(), rows, "shape mismatch: ragged columns");
            for (i, v) in col.iter().enumerate() {
                t.data[i * cols + j] = *v;
            }
        }
        t
    }
}

fn gemm(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Tensor {
    let (m, k) = if ta { (a.cols(), a.rows()) } else { (a.rows(), a.cols()) };
    let (k2, n) = if tb { (b.cols(), b.rows()) } else { (b.rows(), b.cols()) };
    assert_eq!(
        k, k2,
        "shape mismatch in matmul: {:?}{} x {:?}{}",
        a.shape,
        if ta { "ᵀ" } else { "" },
        b.shape,
        if tb { "ᵀ" } else { "" }
    );
    let mut out = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return Tensor::new(m, n, out);
    }
    let (rsa, csa) = if ta { (1, a.cols() as isize) } else { (a.cols() as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols() as isize) } else { (b.cols() as isize, 1) };
    // SAFETY: strides describe in-bounds views of `a`, `b`, and `out`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Tensor::new(m, n, out)
}
