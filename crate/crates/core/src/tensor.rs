//! Dense tensors and the matrix helpers the decompositions are built on.
//!
//! [`Tensor`] stores 32-bit reals in row-major order and is what layers and
//! activations are made of. [`Matrix`] is the 64-bit working type for linear
//! algebra: unfoldings, SVD factors, Gram matrices.
//!
//! # Unfolding convention
//!
//! The mode-`n` unfolding of an order-`N` tensor puts index `n` on the rows.
//! The remaining indices are laid out along the columns in cyclic order
//! `n+1, n+2, ..., N-1, 0, ..., n-1`, the first of them varying slowest.
//! For a 3-way tensor `(I0, I1, I2)` this gives columns `i1*I2 + i2` for
//! mode 0, `i2*I0 + i0` for mode 1 and `i0*I1 + i1` for mode 2.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!("invalid tensor shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "invalid tensor shape {shape:?}"
        );
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f32) -> Self {
        let mut t = Self::zeros(shape);
        let mut idx = vec![0usize; shape.len()];
        for v in t.data.iter_mut() {
            *v = f(&idx);
            increment(&mut idx, shape);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn order(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        idx.iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                debug_assert!(i < d);
                acc * d + i
            })
    }

    pub fn get(&self, idx: &[usize]) -> f32 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f32) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// View a 2-way tensor as a 64-bit matrix.
    pub fn to_matrix(&self) -> Result<Matrix> {
        if self.order() != 2 {
            return Err(Error::Shape(format!(
                "expected a 2-way tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(Matrix {
            rows: self.shape[0],
            cols: self.shape[1],
            data: self.data.iter().map(|&v| v as f64).collect(),
        })
    }
}

/// Advance a row-major multi-index; returns false on wrap-around.
fn increment(idx: &mut [usize], shape: &[usize]) -> bool {
    for k in (0..idx.len()).rev() {
        idx[k] += 1;
        if idx[k] < shape[k] {
            return true;
        }
        idx[k] = 0;
    }
    false
}

/// Row-major dense matrix of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
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

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
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

    /// `selfᵀ · self`.
    pub fn gram(&self) -> Matrix {
        let n = self.cols;
        let mut out = Self::zeros(n, n);
        for r in 0..self.rows {
            let row = self.row(r);
            for i in 0..n {
                let a = row[i];
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out.data[i * n + j] += a * row[j];
                }
            }
        }
        out
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "cannot subtract {:?} from {:?}",
                other.shape(),
                self.shape()
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest absolute entry of `self - I`; the matrix must be square.
    pub fn max_abs_dev_from_identity(&self) -> f64 {
        assert_eq!(self.rows, self.cols, "not square");
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in 0..self.cols {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((self.get(i, j) - target).abs());
            }
        }
        worst
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// First `k` columns.
    pub fn leading_cols(&self, k: usize) -> Matrix {
        assert!(k <= self.cols);
        Matrix::from_fn(self.rows, k, |i, j| self.get(i, j))
    }

    /// First `k` rows.
    pub fn leading_rows(&self, k: usize) -> Matrix {
        assert!(k <= self.rows);
        Matrix {
            rows: k,
            cols: self.cols,
            data: self.data[..k * self.cols].to_vec(),
        }
    }

    /// Round to a 32-bit 2-way tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: vec![self.rows, self.cols],
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

fn check_mode(t: &Tensor, mode: usize) -> Result<()> {
    if mode >= t.order() {
        return Err(Error::ModeOutOfRange {
            mode,
            order: t.order(),
        });
    }
    Ok(())
}

/// Column index of every element of a tensor of `shape` in its mode-`mode`
/// unfolding, in row-major element order, alongside its row index.
fn unfold_map(shape: &[usize], mode: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
    let n = shape.len();
    // Column stride of every non-`mode` index under the cyclic ordering.
    let mut col_stride = vec![0usize; n];
    let mut stride = 1;
    for step in (1..n).rev() {
        let k = (mode + step) % n;
        col_stride[k] = stride;
        stride *= shape[k];
    }
    let total: usize = shape.iter().product();
    let mut idx = vec![0usize; n];
    (0..total).map(move |_| {
        let row = idx[mode];
        let col = idx
            .iter()
            .zip(&col_stride)
            .map(|(&i, &s)| i * s)
            .sum::<usize>();
        increment(&mut idx, shape);
        (row, col)
    })
}

/// Mode-`mode` unfolding; see the module docs for the column ordering.
pub fn unfold(t: &Tensor, mode: usize) -> Result<Matrix> {
    check_mode(t, mode)?;
    let rows = t.shape[mode];
    let cols = t.len() / rows;
    let mut m = Matrix::zeros(rows, cols);
    for ((r, c), &v) in unfold_map(&t.shape, mode).zip(&t.data) {
        m.data[r * cols + c] = v as f64;
    }
    Ok(m)
}

/// Inverse of [`unfold`] for the same mode and shape.
pub fn fold(m: &Matrix, mode: usize, shape: &[usize]) -> Result<Tensor> {
    if mode >= shape.len() {
        return Err(Error::ModeOutOfRange {
            mode,
            order: shape.len(),
        });
    }
    let total: usize = shape.iter().product();
    if shape.contains(&0) || m.rows != shape[mode] || m.rows * m.cols != total {
        return Err(Error::Shape(format!(
            "{}x{} matrix cannot fold into {shape:?} along mode {mode}",
            m.rows, m.cols
        )));
    }
    let mut t = Tensor::zeros(shape);
    for ((r, c), v) in unfold_map(shape, mode).zip(t.data.iter_mut()) {
        *v = m.data[r * m.cols + c] as f32;
    }
    Ok(t)
}

/// `t ×ₙ m`: replaces dimension `mode` (of size `m.cols()`) by `m.rows()`.
pub fn mode_n_product(t: &Tensor, m: &Matrix, mode: usize) -> Result<Tensor> {
    check_mode(t, mode)?;
    if m.cols != t.shape[mode] {
        return Err(Error::Shape(format!(
            "mode-{mode} product needs a matrix with {} columns, got {}x{}",
            t.shape[mode], m.rows, m.cols
        )));
    }
    let unfolded = unfold(t, mode)?;
    let product = m.matmul(&unfolded)?;
    let mut shape = t.shape.clone();
    shape[mode] = m.rows;
    fold(&product, mode, &shape)
}

pub fn frobenius_norm(t: &Tensor) -> f64 {
    t.data
        .iter()
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}
