//! Dense row-major `f32` matrices and the handful of matmul shapes the
//! model needs (`x·Wᵀ`, `dy·W`, `dyᵀ·x`).

use rayon::prelude::*;

use crate::error::{invalid, mismatch, Result};

/// Below this many multiply-adds a matmul stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq)]
pub struct FloatMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FloatMatrix {
    /// Validating constructor: non-empty shape, matching length, finite values.
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(invalid(format!("empty matrix shape {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(mismatch(format!(
                "buffer of {} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite value at flat index {pos}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds from nested rows; all rows must share a length.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(mismatch("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Rows selected by index, in the given order.
    pub fn gather_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self { rows: idx.len(), cols: self.cols, data }
    }

    /// Columns `[start, end)` as a new matrix.
    pub fn col_slice(&self, start: usize, end: usize) -> Self {
        Self::from_fn(self.rows, end - start, |i, j| self.get(i, start + j))
    }

    pub fn fill(&mut self, v: f32) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn add_assign(&mut self, other: &FloatMatrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, c: f32) {
        self.data.iter_mut().for_each(|x| *x *= c);
    }

    pub fn max_abs_diff(&self, other: &FloatMatrix) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for k in chunks * 8..a.len() {
        tail += a[k] * b[k];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub(crate) fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `x · wᵀ`: `x` is `t×k`, `w` is `n×k`, result `t×n`.
pub fn matmul_nt(x: &FloatMatrix, w: &FloatMatrix) -> FloatMatrix {
    assert_eq!(x.cols, w.cols, "matmul_nt inner dimension");
    let (t, n) = (x.rows, w.rows);
    let mut out = vec![0.0f32; t * n];
    let body = |(i, out_row): (usize, &mut [f32])| {
        let xr = x.row(i);
        for (j, o) in out_row.iter_mut().enumerate() {
            *o = dot(xr, w.row(j));
        }
    };
    if t * n * x.cols >= PAR_THRESHOLD && t > 1 {
        out.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.chunks_mut(n).enumerate().for_each(body);
    }
    FloatMatrix::from_raw(t, n, out)
}

/// `dy · w`: `dy` is `t×n`, `w` is `n×k`, result `t×k`.
pub fn matmul_nn(dy: &FloatMatrix, w: &FloatMatrix) -> FloatMatrix {
    assert_eq!(dy.cols, w.rows, "matmul_nn inner dimension");
    let (t, k) = (dy.rows, w.cols);
    let mut out = vec![0.0f32; t * k];
    let body = |(i, out_row): (usize, &mut [f32])| {
        for (j, &g) in dy.row(i).iter().enumerate() {
            if g != 0.0 {
                axpy(g, w.row(j), out_row);
            }
        }
    };
    if t * k * dy.cols >= PAR_THRESHOLD && t > 1 {
        out.par_chunks_mut(k).enumerate().for_each(body);
    } else {
        out.chunks_mut(k).enumerate().for_each(body);
    }
    FloatMatrix::from_raw(t, k, out)
}

/// `dyᵀ · x`: `dy` is `t×n`, `x` is `t×k`, result `n×k`.
pub fn matmul_tn(dy: &FloatMatrix, x: &FloatMatrix) -> FloatMatrix {
    assert_eq!(dy.rows, x.rows, "matmul_tn outer dimension");
    let (n, k) = (dy.cols, x.cols);
    let mut out = vec![0.0f32; n * k];
    let body = |(j, out_row): (usize, &mut [f32])| {
        for t in 0..dy.rows {
            let g = dy.data[t * n + j];
            if g != 0.0 {
                axpy(g, x.row(t), out_row);
            }
        }
    };
    if n * k * dy.rows >= PAR_THRESHOLD && n > 1 {
        out.par_chunks_mut(k).enumerate().for_each(body);
    } else {
        out.chunks_mut(k).enumerate().for_each(body);
    }
    FloatMatrix::from_raw(n, k, out)
}
