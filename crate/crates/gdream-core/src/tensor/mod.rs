//! Dense row-major `f64` matrices and the autodiff tape built on them.
//!
//! Everything numeric in this crate runs on [`Tensor`], a plain
//! `rows x cols` matrix. Higher-rank data (motion clips, token grids)
//! is kept flattened with an explicit indexing convention at the call
//! site. [`tape`] adds reverse-mode differentiation over these ops.

pub mod tape;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    /// Build from a flat row-major buffer.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "buffer length must match shape");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Column vector from a slice.
    pub fn col_from(values: &[f64]) -> Self {
        Self::from_vec(values.len(), 1, values.to_vec())
    }

    /// 1 x n row vector from a slice.
    pub fn row_from(values: &[f64]) -> Self {
        Self::from_vec(1, values.len(), values.to_vec())
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(1, 1, vec![value])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
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

    /// The single entry of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() requires a 1x1 tensor");
        self.data[0]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert!(self.same_shape(other), "shape mismatch in zip");
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul_elem(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| x * c)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert!(self.same_shape(other), "shape mismatch in add_assign");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Frobenius dot product.
    pub fn dot(&self, other: &Tensor) -> f64 {
        assert!(self.same_shape(other), "shape mismatch in dot");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Ensure every entry is finite, reporting `what` on failure.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite value in {what}")))
        }
    }
}

/// `a (m x k) * b (k x n)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul inner dimensions must agree");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b.data[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    Tensor { rows: m, cols: n, data: out }
}

/// `a (m x k) * b^T (n x k) -> m x n`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.cols, "matmul_nt inner dimensions must agree");
    let (m, k, n) = (a.rows, a.cols, b.rows);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor { rows: m, cols: n, data: out }
}

/// `a^T (k x m) * b (k x n) -> m x n`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows, b.rows, "matmul_tn inner dimensions must agree");
    let (k, m, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for kk in 0..k {
        let arow = &a.data[kk * m..(kk + 1) * m];
        let brow = &b.data[kk * n..(kk + 1) * n];
        for i in 0..m {
            let aki = arow[i];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aki * brow[j];
            }
        }
    }
    Tensor { rows: m, cols: n, data: out }
}

/// Per-row 3x3 matrix product on flattened `m x 9` tensors.
pub fn batch_matmul3(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, 9);
    assert_eq!(b.cols, 9);
    assert_eq!(a.rows, b.rows);
    let mut out = Tensor::zeros(a.rows, 9);
    for r in 0..a.rows {
        let av = a.row(r);
        let bv = b.row(r);
        let ov = out.row_mut(r);
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += av[i * 3 + k] * bv[k * 3 + j];
                }
                ov[i * 3 + j] = acc;
            }
        }
    }
    out
}

/// Per-row matrix-vector product: `R (m x 9) . v (m x 3) -> m x 3`.
pub fn batch_matvec3(r: &Tensor, v: &Tensor) -> Tensor {
    assert_eq!(r.cols, 9);
    assert_eq!(v.cols, 3);
    assert_eq!(r.rows, v.rows);
    let mut out = Tensor::zeros(r.rows, 3);
    for row in 0..r.rows {
        let rv = r.row(row);
        let vv = v.row(row);
        let ov = out.row_mut(row);
        for i in 0..3 {
            ov[i] = rv[i * 3] * vv[0] + rv[i * 3 + 1] * vv[1] + rv[i * 3 + 2] * vv[2];
        }
    }
    out
}

/// Rodrigues coefficients `(sin t / t, (1 - cos t) / t^2)` as functions of
/// `s = t^2`, with a series branch keeping them (and their derivatives)
/// smooth through zero.
///
/// The branch point is far above the series truncation error, so both
/// branches agree to machine precision where they meet.
pub fn rot_coeffs(s: f64) -> (f64, f64) {
    if s < 1e-4 {
        let a = 1.0 - s / 6.0 + s * s / 120.0 - s * s * s / 5040.0;
        let b = 0.5 - s / 24.0 + s * s / 720.0 - s * s * s / 40320.0;
        (a, b)
    } else {
        let t = s.sqrt();
        ((t.sin()) / t, (1.0 - t.cos()) / s)
    }
}

/// Derivatives of [`rot_coeffs`] with respect to `s`.
pub fn rot_coeff_grads(s: f64) -> (f64, f64) {
    if s < 1e-4 {
        let da = -1.0 / 6.0 + s / 60.0 - s * s / 1680.0;
        let db = -1.0 / 24.0 + s / 360.0 - s * s / 13440.0;
        (da, db)
    } else {
        let t = s.sqrt();
        let a = t.sin() / t;
        let b = (1.0 - t.cos()) / s;
        let da = (t.cos() - a) / (2.0 * s);
        let db = (a / 2.0 - b) / s;
        (da, db)
    }
}

/// Flattened 3x3 skew matrix of `v` such that `skew(v) * u = v x u`.
pub fn skew3(v: [f64; 3]) -> [f64; 9] {
    let [x, y, z] = v;
    [0.0, -z, y, z, 0.0, -x, -y, x, 0.0]
}
