//! Dense row-major `f64` matrices.
//!
//! Every constructor and operation here either rejects non-finite input or
//! checks its output, so a `Matrix` that exists is always finite.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            if r > 0 {
                write!(f, "; ")?;
            }
            let row: Vec<String> = self.row(r).iter().map(|v| format!("{v:.6}")).collect();
            write!(f, "{}", row.join(", "))?;
        }
        write!(f, "]")
    }
}

fn ensure_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "Matrix::new",
                lhs: (rows, cols),
                rhs: (data.len(), 1),
            });
        }
        ensure_finite("Matrix::new", &data)?;
        Ok(Self { rows, cols, data })
    }

    /// Internal constructor for results of operations that were already
    /// shape-checked; only finiteness is verified.
    fn checked(op: &'static str, rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        debug_assert_eq!(data.len(), rows * cols);
        ensure_finite(op, &data)?;
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Result<Self> {
        Self::new(rows, cols, vec![value; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn row_vector(values: &[f64]) -> Result<Self> {
        Self::new(1, values.len(), values.to_vec())
    }

    pub fn col_vector(values: &[f64]) -> Result<Self> {
        Self::new(values.len(), 1, values.to_vec())
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "Matrix::from_rows",
                    lhs: (rows.len(), cols),
                    rhs: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Sets one entry. Non-finite values are rejected.
    pub fn set(&mut self, r: usize, c: usize, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFinite("Matrix::set"));
        }
        self.data[r * self.cols + c] = value;
        Ok(())
    }

    /// Flat access used by optimizers and finite differencing.
    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn scalar(&self) -> Result<f64> {
        if self.shape() != (1, 1) {
            return Err(Error::NotScalar(self.shape()));
        }
        Ok(self.data[0])
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Matrix::checked("matmul", n, m, out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Matrix {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    fn same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        Ok(())
    }

    pub fn zip_with(
        &self,
        other: &Matrix,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        self.same_shape(other, op)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Matrix::checked(op, self.rows, self.cols, data)
    }

    pub fn map(&self, op: &'static str, f: impl Fn(f64) -> f64) -> Result<Matrix> {
        let data = self.data.iter().map(|&a| f(a)).collect();
        Matrix::checked(op, self.rows, self.cols, data)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Result<Matrix> {
        self.map("scale", |a| a * s)
    }

    /// Adds the `1 x cols` row vector `row` to every row.
    pub fn add_row(&self, row: &Matrix) -> Result<Matrix> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.shape(),
                rhs: row.shape(),
            });
        }
        let mut data = self.data.clone();
        for chunk in data.chunks_mut(self.cols.max(1)) {
            for (d, b) in chunk.iter_mut().zip(&row.data) {
                *d += b;
            }
        }
        Matrix::checked("add_row", self.rows, self.cols, data)
    }

    pub fn sigmoid(&self) -> Result<Matrix> {
        self.map("sigmoid", sigmoid)
    }

    pub fn tanh(&self) -> Result<Matrix> {
        self.map("tanh", f64::tanh)
    }

    pub fn ln(&self) -> Result<Matrix> {
        if self.data.iter().any(|&v| v <= 0.0) {
            return Err(Error::NonFinite("ln"));
        }
        self.map("ln", f64::ln)
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&self) -> Result<Matrix> {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.cols.max(1)) {
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
        Matrix::checked("softmax_rows", self.rows, self.cols, data)
    }

    pub fn concat(parts: &[&Matrix], axis: Axis) -> Result<Matrix> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero parts".into()))?;
        match axis {
            Axis::Rows => {
                let cols = first.cols;
                let mut data = Vec::new();
                let mut rows = 0;
                for p in parts {
                    if p.cols != cols {
                        return Err(Error::Shape {
                            op: "concat(rows)",
                            lhs: first.shape(),
                            rhs: p.shape(),
                        });
                    }
                    data.extend_from_slice(&p.data);
                    rows += p.rows;
                }
                Ok(Matrix { rows, cols, data })
            }
            Axis::Cols => {
                let rows = first.rows;
                for p in parts {
                    if p.rows != rows {
                        return Err(Error::Shape {
                            op: "concat(cols)",
                            lhs: first.shape(),
                            rhs: p.shape(),
                        });
                    }
                }
                let cols: usize = parts.iter().map(|p| p.cols).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for p in parts {
                        data.extend_from_slice(p.row(r));
                    }
                }
                Ok(Matrix { rows, cols, data })
            }
        }
    }

    /// Rows `idx[0], idx[1], ...` stacked; indices may repeat.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Matrix> {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            if i >= self.rows {
                return Err(Error::InvalidArgument(format!(
                    "gather_rows: row {i} out of range for {} rows",
                    self.rows
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        })
    }

    /// Row `r` of `self` is added into output row `idx[r]`.
    pub fn scatter_add_rows(&self, idx: &[usize], out_rows: usize) -> Result<Matrix> {
        if idx.len() != self.rows {
            return Err(Error::Shape {
                op: "scatter_add_rows",
                lhs: self.shape(),
                rhs: (idx.len(), 1),
            });
        }
        let mut out = Matrix::zeros(out_rows, self.cols);
        for (r, &i) in idx.iter().enumerate() {
            if i >= out_rows {
                return Err(Error::InvalidArgument(format!(
                    "scatter_add_rows: target row {i} out of range for {out_rows} rows"
                )));
            }
            let src = &self.data[r * self.cols..(r + 1) * self.cols];
            for (o, s) in out.data[i * self.cols..(i + 1) * self.cols]
                .iter_mut()
                .zip(src)
            {
                *o += s;
            }
        }
        ensure_finite("scatter_add_rows", &out.data)?;
        Ok(out)
    }

    /// Column sums as a `1 x cols` row.
    pub fn sum_rows(&self) -> Result<Matrix> {
        let mut out = vec![0.0; self.cols];
        for row in self.data.chunks(self.cols.max(1)) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Matrix::checked("sum_rows", 1, self.cols, out)
    }

    /// Column means as a `1 x cols` row. Each column is summed in sorted
    /// order, so the result is exactly invariant under row permutations.
    pub fn mean_rows(&self) -> Result<Matrix> {
        if self.rows == 0 {
            return Err(Error::InvalidArgument("mean_rows of zero rows".into()));
        }
        let mut out = Vec::with_capacity(self.cols);
        let mut col = Vec::with_capacity(self.rows);
        for c in 0..self.cols {
            col.clear();
            col.extend((0..self.rows).map(|r| self.data[r * self.cols + c]));
            col.sort_by(f64::total_cmp);
            out.push(col.iter().sum::<f64>() / self.rows as f64);
        }
        Matrix::checked("mean_rows", 1, self.cols, out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Multiplies row `r` by `s[r]`, where `s` is `rows x 1`.
    pub fn scale_rows(&self, s: &Matrix) -> Result<Matrix> {
        if s.cols != 1 || s.rows != self.rows {
            return Err(Error::Shape {
                op: "scale_rows",
                lhs: self.shape(),
                rhs: s.shape(),
            });
        }
        let mut data = self.data.clone();
        for (row, &f) in data.chunks_mut(self.cols.max(1)).zip(&s.data) {
            for v in row {
                *v *= f;
            }
        }
        Matrix::checked("scale_rows", self.rows, self.cols, data)
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Matrix> {
        if start + len > self.cols {
            return Err(Error::InvalidArgument(format!(
                "slice_cols: [{start}, {}) out of range for {} cols",
                start + len,
                self.cols
            )));
        }
        let mut data = Vec::with_capacity(self.rows * len);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..start + len]);
        }
        Ok(Matrix {
            rows: self.rows,
            cols: len,
            data,
        })
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Matrix> {
        self.map("clamp", |v| v.clamp(lo, hi))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Indices of the `min(k, len)` largest scores, ties broken toward the
/// smaller index, returned in ascending index order.
pub fn topk_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("topk_indices: empty scores".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("topk_indices: k must be >= 1".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("topk_indices"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k.min(scores.len()));
    order.sort_unstable();
    Ok(order)
}
