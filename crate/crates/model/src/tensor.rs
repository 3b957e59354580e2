//! Dense row-major matrices and the few matmul kernels the network needs.
//! Sequences are matrices of shape (positions × d_model); parameter vectors
//! are 1×n matrices so one visitor type covers everything.

use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat<S> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Mat<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![S::ZERO; rows * cols] }
    }

    pub fn from_rows(rows: Vec<Vec<S>>) -> Self {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for row in rows {
            assert_eq!(row.len(), n_cols, "ragged rows");
            data.extend(row);
        }
        Mat { rows: n_rows, cols: n_cols, data }
    }

    pub fn row_vector(data: Vec<S>) -> Self {
        Mat { rows: 1, cols: data.len(), data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut S {
        &mut self.data[r * self.cols + c]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = S::ZERO);
    }

    pub fn add_assign(&mut self, other: &Mat<S>) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// self (m×k) @ b (k×n) → (m×n), accumulated row-wise for locality.
    pub fn matmul_nn(&self, b: &Mat<S>) -> Mat<S> {
        assert_eq!(self.cols, b.rows, "matmul_nn shape mismatch");
        let mut out = Mat::zeros(self.rows, b.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (l, &a) in a_row.iter().enumerate() {
                let b_row = b.row(l);
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += a * bv;
                }
            }
        }
        out
    }

    /// self (m×k) @ b^T where b is (n×k) → (m×n); both operands read
    /// contiguously (dot products of rows).
    pub fn matmul_nt(&self, b: &Mat<S>) -> Mat<S> {
        assert_eq!(self.cols, b.cols, "matmul_nt shape mismatch");
        let mut out = Mat::zeros(self.rows, b.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (j, o) in out_row.iter_mut().enumerate() {
                *o = dot(a_row, b.row(j));
            }
        }
        out
    }

    /// acc += self^T @ b, where self is (m×k) and b is (m×n); acc is (k×n).
    /// This is the dW pattern: rows of activations times rows of gradients.
    pub fn accumulate_tn(&self, b: &Mat<S>, acc: &mut Mat<S>) {
        assert_eq!(self.rows, b.rows, "accumulate_tn shape mismatch");
        assert_eq!((acc.rows, acc.cols), (self.cols, b.cols));
        for r in 0..self.rows {
            let a_row = self.row(r);
            let b_row = b.row(r);
            for (k, &a) in a_row.iter().enumerate() {
                if a == S::ZERO {
                    continue;
                }
                let acc_row = acc.row_mut(k);
                for (o, &bv) in acc_row.iter_mut().zip(b_row) {
                    *o += a * bv;
                }
            }
        }
    }
}

#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    // two accumulators help the autovectorizer on both f32 and f64
    let mut acc0 = S::ZERO;
    let mut acc1 = S::ZERO;
    let mut chunks_a = a.chunks_exact(2);
    let mut chunks_b = b.chunks_exact(2);
    for (ca, cb) in (&mut chunks_a).zip(&mut chunks_b) {
        acc0 += ca[0] * cb[0];
        acc1 += ca[1] * cb[1];
    }
    for (x, y) in chunks_a.remainder().iter().zip(chunks_b.remainder()) {
        acc0 += *x * *y;
    }
    acc0 + acc1
}

#[inline]
pub fn axpy<S: Scalar>(alpha: S, x: &[S], y: &mut [S]) {
    debug_assert_eq!(x.len(), y.len());
    for (xv, yv) in x.iter().zip(y.iter_mut()) {
        *yv += alpha * *xv;
    }
}

/// Numerically stable softmax over a slice, in place.
pub fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let mut max = row[0];
    for &v in row.iter() {
        max = max.maximum(v);
    }
    let mut sum = S::ZERO;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
