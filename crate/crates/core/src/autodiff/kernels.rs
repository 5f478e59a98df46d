//! Dense row-major kernels used by the tape.
//!
//! Every reduction accumulates into four lanes keyed by `k % 4` and folds
//! them as `(l0 + l1) + (l2 + l3)`. Appending zero-weighted terms to a dot
//! product therefore leaves its value bit-identical, which the
//! attention-reduction checks rely on.

use crate::Scalar;

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    for (lane, (x, y)) in ca.remainder().iter().zip(cb.remainder()).enumerate() {
        acc[lane] += *x * *y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Scalar>(y: &mut [T], alpha: T, x: &[T]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// `out[n×o] = a[n×k] · b[o×k]ᵀ`
pub fn matmul_t<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, o: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * o);
    for row in a.chunks_exact(k).take(n) {
        for col in b.chunks_exact(k).take(o) {
            out.push(dot(row, col));
        }
    }
    out
}

/// `out[n×m] = a[n×k] · b[k×m]`
pub fn matmul<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for (row, out_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(m)).take(n) {
        for (&coef, b_row) in row.iter().zip(b.chunks_exact(m)) {
            axpy(out_row, coef, b_row);
        }
    }
    out
}
