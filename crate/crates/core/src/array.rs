//! Row-major 2-D array of `f64` used as the numeric carrier for batches.

use serde::{Deserialize, Serialize};

use crate::error::{QflowError, Result};

/// A `rows × cols` matrix stored row-major. Rows index the batch, columns the features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseArray {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseArray {
    /// Builds an array from row-major data, rejecting bad lengths and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(QflowError::dims("DenseArray::new", rows * cols, data.len()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(QflowError::NonFinite(format!(
                "DenseArray::new entry ({}, {})",
                i / cols.max(1),
                i % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Stacks equally sized rows. An empty slice yields a `0 × 0` array.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(QflowError::dims(format!("DenseArray::from_rows row {i}"), cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// A single-row array.
    pub fn row_vector(values: &[f64]) -> Result<Self> {
        Self::new(1, values.len(), values.to_vec())
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
        // chunks_exact panics on zero chunk size
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_vec_unchecked(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        self.data.iter_mut().for_each(|v| *v = f(*v));
    }

    /// Elementwise `self + scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &DenseArray) -> Result<()> {
        self.expect_shape("axpy", other.shape())?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &DenseArray) -> Result<DenseArray> {
        self.expect_shape("sub", other.shape())?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Self::from_vec_unchecked(self.rows, self.cols, data))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> DenseArray {
        self.map(|v| v.clamp(lo, hi))
    }

    /// Concatenates arrays along columns; all parts must share a row count.
    pub fn hstack(parts: &[&DenseArray]) -> Result<DenseArray> {
        let rows = parts.first().map_or(0, |p| p.rows);
        for p in parts {
            if p.rows != rows {
                return Err(QflowError::dims("hstack rows", rows, p.rows));
            }
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(Self::from_vec_unchecked(rows, cols, data))
    }

    /// Concatenates arrays along rows; all parts must share a column count.
    pub fn vstack(parts: &[&DenseArray]) -> Result<DenseArray> {
        let cols = parts.first().map_or(0, |p| p.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(QflowError::dims("vstack cols", cols, p.cols));
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Self::from_vec_unchecked(rows, cols, data))
    }

    /// Rows `start..end` as a new array.
    pub fn slice_rows(&self, start: usize, end: usize) -> DenseArray {
        Self::from_vec_unchecked(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        )
    }

    /// Columns `start..end` as a new array.
    pub fn slice_cols(&self, start: usize, end: usize) -> DenseArray {
        let mut data = Vec::with_capacity(self.rows * (end - start));
        for r in self.iter_rows() {
            data.extend_from_slice(&r[start..end]);
        }
        Self::from_vec_unchecked(self.rows, end - start, data)
    }

    /// Gathers the given rows (with repetition allowed).
    pub fn select_rows(&self, indices: &[usize]) -> DenseArray {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self::from_vec_unchecked(indices.len(), self.cols, data)
    }

    /// Repeats every row `times` times consecutively.
    pub fn repeat_rows(&self, times: usize) -> DenseArray {
        let mut data = Vec::with_capacity(self.rows * times * self.cols);
        for r in self.iter_rows() {
            for _ in 0..times {
                data.extend_from_slice(r);
            }
        }
        Self::from_vec_unchecked(self.rows * times, self.cols, data)
    }

    /// Per-row Euclidean norms.
    pub fn row_norms(&self) -> Vec<f64> {
        self.iter_rows()
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }

    pub fn expect_shape(&self, context: &str, shape: (usize, usize)) -> Result<()> {
        if self.rows != shape.0 {
            return Err(QflowError::dims(format!("{context} (rows)"), shape.0, self.rows));
        }
        if self.cols != shape.1 {
            return Err(QflowError::dims(format!("{context} (cols)"), shape.1, self.cols));
        }
        Ok(())
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` where `op` optionally transposes.
pub(crate) fn gemm(
    alpha: f64,
    a: &DenseArray,
    transpose_a: bool,
    b: &DenseArray,
    transpose_b: bool,
    beta: f64,
    c: &mut DenseArray,
) {
    let (m, k) = if transpose_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if transpose_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "gemm inner dimension");
    assert_eq!((c.rows, c.cols), (m, n), "gemm output shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.data.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if transpose_a { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if transpose_b { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: strides and extents above describe exactly the buffers' row-major layouts,
    // and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}
