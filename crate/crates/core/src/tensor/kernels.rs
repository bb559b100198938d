//! Dense row-major kernels used by the tensor ops.
//!
//! All products accumulate over the shared dimension in ascending index
//! order, so results are deterministic and trailing zero terms never change
//! a partial sum.

use crate::scalar::Scalar;

/// `c[n,r] += a[n,q] · b[q,r]`
pub fn gemm<T: Scalar>(a: &[T], b: &[T], c: &mut [T], n: usize, q: usize, r: usize) {
    debug_assert_eq!(a.len(), n * q);
    debug_assert_eq!(b.len(), q * r);
    debug_assert_eq!(c.len(), n * r);
    if r == 0 {
        return;
    }
    for (arow, crow) in a.chunks_exact(q.max(1)).zip(c.chunks_exact_mut(r)) {
        if q == 0 {
            break;
        }
        for (k, &aik) in arow.iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            let brow = &b[k * r..(k + 1) * r];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj = *cj + aik * bj;
            }
        }
    }
}

/// `c[q,r] += a[n,q]ᵀ · b[n,r]`
pub fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], n: usize, q: usize, r: usize) {
    debug_assert_eq!(a.len(), n * q);
    debug_assert_eq!(b.len(), n * r);
    debug_assert_eq!(c.len(), q * r);
    if q == 0 || r == 0 {
        return;
    }
    for (arow, brow) in a.chunks_exact(q).zip(b.chunks_exact(r)) {
        for (k, &aik) in arow.iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            let crow = &mut c[k * r..(k + 1) * r];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj = *cj + aik * bj;
            }
        }
    }
}

pub fn transpose<T: Scalar>(m: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = m[i * cols + j];
        }
    }
    out
}
