//! Dense row-major matrices and the handful of kernels the model needs.
//!
//! Kernels are written with contiguous inner loops so the autovectorizer can
//! do its job; none of them reorder floating-point reductions between runs,
//! which keeps every result bit-reproducible.

use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "shape/data mismatch");
        Mat { rows, cols, data }
    }

    #[inline(always)]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline(always)]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// self += other, elementwise.
    pub fn add_assign(&mut self, other: &Mat<T>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + *b;
        }
    }

    /// self *= s, elementwise.
    pub fn scale(&mut self, s: T) {
        for a in self.data.iter_mut() {
            *a = *a * s;
        }
    }

    pub fn map_width<U: Real>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
        }
    }
}

/// C = A·B. A is m×k, B is k×n, C is m×n (overwritten).
pub fn matmul<T: Real>(a: &Mat<T>, b: &Mat<T>, c: &mut Mat<T>) {
    assert_eq!(a.cols, b.rows);
    assert_eq!(c.rows, a.rows);
    assert_eq!(c.cols, b.cols);
    let n = b.cols;
    for i in 0..a.rows {
        let a_row = a.row(i);
        let c_row = c.row_mut(i);
        c_row.iter_mut().for_each(|x| *x = T::zero());
        for (l, &av) in a_row.iter().enumerate() {
            let b_row = &b.data[l * n..(l + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row.iter()) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// C = A·Bᵀ. A is m×k, B is n×k, C is m×n (overwritten).
pub fn matmul_nt<T: Real>(a: &Mat<T>, b: &Mat<T>, c: &mut Mat<T>) {
    assert_eq!(a.cols, b.cols);
    assert_eq!(c.rows, a.rows);
    assert_eq!(c.cols, b.rows);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let c_row = c.row_mut(i);
        for (j, cv) in c_row.iter_mut().enumerate() {
            *cv = dot(a_row, b.row(j));
        }
    }
}

/// C = Aᵀ·B. A is m×k, B is m×n, C is k×n (overwritten).
pub fn matmul_tn<T: Real>(a: &Mat<T>, b: &Mat<T>, c: &mut Mat<T>) {
    assert_eq!(a.rows, b.rows);
    assert_eq!(c.rows, a.cols);
    assert_eq!(c.cols, b.cols);
    c.data.iter_mut().for_each(|x| *x = T::zero());
    let n = b.cols;
    for i in 0..a.rows {
        let a_row = a.row(i);
        let b_row = &b.data[i * n..(i + 1) * n];
        for (l, &av) in a_row.iter().enumerate() {
            let c_row = &mut c.data[l * n..(l + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row.iter()) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// Accumulating variant: C += Aᵀ·B. Used for gradient accumulation.
pub fn matmul_tn_acc<T: Real>(a: &Mat<T>, b: &Mat<T>, c: &mut Mat<T>) {
    assert_eq!(a.rows, b.rows);
    assert_eq!(c.rows, a.cols);
    assert_eq!(c.cols, b.cols);
    let n = b.cols;
    for i in 0..a.rows {
        let a_row = a.row(i);
        let b_row = &b.data[i * n..(i + 1) * n];
        for (l, &av) in a_row.iter().enumerate() {
            let c_row = &mut c.data[l * n..(l + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row.iter()) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
/// The accumulation order is fixed, so results are run-to-run identical.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] = acc[0] + a[i] * b[i];
        acc[1] = acc[1] + a[i + 1] * b[i + 1];
        acc[2] = acc[2] + a[i + 2] * b[i + 2];
        acc[3] = acc[3] + a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s = s + a[i] * b[i];
    }
    s
}

/// y += s·x.
#[inline]
pub fn axpy<T: Real>(s: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yv, &xv) in y.iter_mut().zip(x.iter()) {
        *yv = *yv + s * xv;
    }
}

/// In-place softmax with max subtraction.
pub fn softmax_inplace<T: Real>(xs: &mut [T]) {
    let mut m = T::neg_infinity();
    for &x in xs.iter() {
        if x > m {
            m = x;
        }
    }
    let mut sum = T::zero();
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        sum = sum + *x;
    }
    let inv = T::one() / sum;
    for x in xs.iter_mut() {
        *x = *x * inv;
    }
}
