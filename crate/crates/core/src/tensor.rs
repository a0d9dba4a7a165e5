use serde::{Deserialize, Serialize};

use crate::num::{dot, Scalar};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        self.map(|v| U::from_f64_lossy(v.as_f64()))
    }

    /// `self · x` for a single vector.
    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.cols, "matvec dimension mismatch");
        (0..self.rows)
            .map(|r| T::from_f64_lossy(dot(self.row(r), x)))
            .collect()
    }

    /// `selfᵀ · y` for a single vector.
    pub fn matvec_t(&self, y: &[T]) -> Vec<T> {
        assert_eq!(y.len(), self.rows, "matvec_t dimension mismatch");
        let mut acc = vec![0.0f64; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            let yr = yr.as_f64();
            if yr == 0.0 {
                continue;
            }
            for (a, &w) in acc.iter_mut().zip(self.row(r)) {
                *a += w.as_f64() * yr;
            }
        }
        acc.into_iter().map(T::from_f64_lossy).collect()
    }

    /// Rows of `xs` times `selfᵀ`: applies this matrix as a linear layer to
    /// every row of `xs`.
    pub fn apply_rows(&self, xs: &Matrix<T>) -> Matrix<T> {
        assert_eq!(xs.cols, self.cols, "linear input width mismatch");
        let mut out = Matrix::zeros(xs.rows, self.rows);
        for t in 0..xs.rows {
            let x = xs.row(t);
            let o = out.row_mut(t);
            for (r, slot) in o.iter_mut().enumerate() {
                *slot = T::from_f64_lossy(dot(self.row(r), x));
            }
        }
        out
    }

    /// Rows of `dys` times `self`: the transpose of [`Matrix::apply_rows`].
    pub fn apply_rows_t(&self, dys: &Matrix<T>) -> Matrix<T> {
        assert_eq!(dys.cols, self.rows, "transpose input width mismatch");
        let mut out = Matrix::zeros(dys.rows, self.cols);
        for t in 0..dys.rows {
            let v = self.matvec_t(dys.row(t));
            out.row_mut(t).copy_from_slice(&v);
        }
        out
    }

    /// `Σ_t dys[t] ⊗ xs[t]`, the weight gradient of a linear layer.
    pub fn outer_accumulate(dys: &Matrix<T>, xs: &Matrix<T>) -> Matrix<T> {
        assert_eq!(dys.rows, xs.rows);
        let (rows, cols) = (dys.cols, xs.cols);
        let mut acc = vec![0.0f64; rows * cols];
        for t in 0..xs.rows {
            let x = xs.row(t);
            for (r, &dy) in dys.row(t).iter().enumerate() {
                let dy = dy.as_f64();
                if dy == 0.0 {
                    continue;
                }
                let dst = &mut acc[r * cols..(r + 1) * cols];
                for (a, &xv) in dst.iter_mut().zip(x) {
                    *a += dy * xv.as_f64();
                }
            }
        }
        Matrix {
            rows,
            cols,
            data: acc.into_iter().map(T::from_f64_lossy).collect(),
        }
    }

    pub fn sub(&self, other: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.shape(), other.shape());
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a - b)
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Matrix<T>) {
        assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn frobenius_sq(&self) -> f64 {
        dot(&self.data, &self.data)
    }

    pub fn max_abs_diff(&self, other: &Matrix<T>) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apply_rows_matches_matvec() {
        let w = Matrix::from_fn(3, 2, |r, c| (r * 2 + c) as f64);
        let xs = Matrix::from_rows(&[vec![1.0, -1.0], vec![0.5, 2.0]]);
        let out = w.apply_rows(&xs);
        assert_eq!(out.row(0), w.matvec(xs.row(0)).as_slice());
        assert_eq!(out.row(1), w.matvec(xs.row(1)).as_slice());
    }

    #[test]
    fn transpose_is_adjoint() {
        let w = Matrix::from_fn(3, 4, |r, c| (r as f64 - c as f64) * 0.3 + 0.1);
        let x = vec![0.2, -1.0, 0.7, 3.0];
        let y = vec![1.5, -0.25, 2.0];
        let lhs = dot(&w.matvec(&x), &y);
        let rhs = dot(&x, &w.matvec_t(&y));
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn outer_accumulate_sums_rank_one_terms() {
        let dys = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, -1.0]]);
        let xs = Matrix::from_rows(&[vec![3.0], vec![4.0]]);
        let g = Matrix::outer_accumulate(&dys, &xs);
        assert_eq!(g.as_slice(), &[3.0, 2.0]);
    }
}
