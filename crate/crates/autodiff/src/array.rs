//! Dense row-major matrices of `f64`.
//!
//! Every value flowing through a [`Tape`](crate::Tape) is an [`Array`] with
//! two dimensions. Scalars are `1 x 1`, row vectors are `1 x n`.

use std::fmt;

#[derive(Clone, PartialEq)]
pub struct Array {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Array {
    /// Panics if `data.len() != rows * cols`.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "array data length {} does not match shape {}x{}",
            data.len(),
            rows,
            cols
        );
        Array { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Array::filled(rows, cols, 0.0)
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Array::filled(rows, cols, 1.0)
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Array { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn scalar(v: f64) -> Self {
        Array { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn row(data: Vec<f64>) -> Self {
        let cols = data.len();
        Array { rows: 1, cols, data }
    }

    pub fn column(data: Vec<f64>) -> Self {
        let rows = data.len();
        Array { rows, cols: 1, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut a = Array::zeros(n, n);
        for i in 0..n {
            a.data[i * n + i] = 1.0;
        }
        a
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Array { rows: rows.len(), cols, data }
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
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a `1 x 1` array. Panics otherwise.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on {}x{} array", self.rows, self.cols);
        self.data[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Array {
        Array {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
        assert_eq!(self.shape(), other.shape(), "elementwise shape mismatch");
        Array {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn dot(&self, other: &Array) -> f64 {
        assert_eq!(self.len(), other.len(), "dot length mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn matmul(&self, other: &Array) -> Array {
        assert_eq!(
            self.cols, other.rows,
            "matmul inner dimension mismatch: {}x{} . {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Array { rows: m, cols: n, data: out }
    }

    pub fn transpose(&self) -> Array {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Array { rows: self.cols, cols: self.rows, data: out }
    }

    /// `[m, n] -> [1, n]`
    pub fn sum_rows(&self) -> Array {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row_slice(r)) {
                *o += v;
            }
        }
        Array::row(out)
    }

    /// `[m, n] -> [m, 1]`
    pub fn sum_cols(&self) -> Array {
        Array::column((0..self.rows).map(|r| self.row_slice(r).iter().sum()).collect())
    }

    /// `[1, n] -> [rows, n]`
    pub fn broadcast_rows(&self, rows: usize) -> Array {
        assert_eq!(self.rows, 1, "broadcast_rows needs a single row");
        let mut data = Vec::with_capacity(rows * self.cols);
        for _ in 0..rows {
            data.extend_from_slice(&self.data);
        }
        Array { rows, cols: self.cols, data }
    }

    /// `[m, 1] -> [m, cols]`
    pub fn broadcast_cols(&self, cols: usize) -> Array {
        assert_eq!(self.cols, 1, "broadcast_cols needs a single column");
        let mut data = Vec::with_capacity(self.rows * cols);
        for &v in &self.data {
            data.extend(std::iter::repeat(v).take(cols));
        }
        Array { rows: self.rows, cols, data }
    }

    /// Row-wise softmax, shifted by the row maximum.
    pub fn softmax_rows(&self) -> Array {
        let mut out = self.data.clone();
        for r in 0..self.rows {
            let row = &mut out[r * self.cols..(r + 1) * self.cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Array { rows: self.rows, cols: self.cols, data: out }
    }

    pub fn concat_cols(parts: &[&Array]) -> Array {
        let rows = parts.first().map_or(0, |p| p.rows);
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                assert_eq!(p.rows, rows, "concat_cols row mismatch");
                data.extend_from_slice(p.row_slice(r));
            }
        }
        Array { rows, cols, data }
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Array {
        assert!(start <= end && end <= self.cols, "column slice {start}..{end} out of range");
        let width = end - start;
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row_slice(r)[start..end]);
        }
        Array { rows: self.rows, cols: width, data }
    }

    /// Embeds `self` into a zero matrix with `total` columns at column `start`.
    pub fn pad_cols(&self, start: usize, total: usize) -> Array {
        assert!(start + self.cols <= total, "pad_cols target too narrow");
        let mut out = Array::zeros(self.rows, total);
        for r in 0..self.rows {
            out.data[r * total + start..r * total + start + self.cols]
                .copy_from_slice(self.row_slice(r));
        }
        out
    }

    /// Reinterprets the data with a new shape of equal size.
    pub fn reshaped(self, rows: usize, cols: usize) -> Array {
        Array::new(rows, cols, self.data)
    }

    pub fn add(&self, other: &Array) -> Array {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Array) -> Array {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Array {
        self.map(|v| v * c)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl fmt::Debug for Array {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Array[{}x{}]{:?}", self.rows, self.cols, self.data)
    }
}
