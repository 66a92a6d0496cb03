//! Raw matrix-multiply loops shared by forward and backward passes.
//!
//! Loop orders are chosen so the innermost loop streams over contiguous
//! memory, which the autovectorizer handles well at the matrix sizes this
//! crate is used with.

use crate::tensor::Scalar;

/// `c += a · b` where `a` is `m×k`, `b` is `k×n`, `c` is `m×n`.
pub(crate) fn matmul_acc<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + aip * *bv;
            }
        }
    }
}

/// `c += a · bᵀ` where `a` is `m×k`, `b` is `n×k`, `c` is `m×n`.
pub(crate) fn matmul_nt_acc<T: Scalar>(
    c: &mut [T],
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (av, bv) in arow.iter().zip(brow) {
                acc = acc + *av * *bv;
            }
            crow[j] = crow[j] + acc;
        }
    }
}

/// `c += aᵀ · b` where `a` is `k×m`, `b` is `k×n`, `c` is `m×n`.
pub(crate) fn matmul_tn_acc<T: Scalar>(
    c: &mut [T],
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = arow[i];
            if api == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + api * *bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(m: usize, n: usize, f: impl Fn(usize, usize) -> f64) -> Vec<f64> {
        (0..m * n).map(|i| f(i / n, i % n)).collect()
    }

    /// Independent index-by-index reference product.
    fn reference(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn variants_agree_with_reference() {
        let (m, k, n) = (4, 5, 3);
        let a = dense(m, k, |i, j| (i * 7 + j) as f64 * 0.25 - 2.0);
        let b = dense(k, n, |i, j| (i as f64 - j as f64) * 0.5 + 0.125);
        let want = reference(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        matmul_acc(&mut c, &a, &b, m, k, n);
        assert_eq!(c, want);

        // a · bᵀ with b pre-transposed must reproduce the same product.
        let mut bt = vec![0.0; n * k];
        for i in 0..k {
            for j in 0..n {
                bt[j * k + i] = b[i * n + j];
            }
        }
        let mut c = vec![0.0; m * n];
        matmul_nt_acc(&mut c, &a, &bt, m, k, n);
        assert_eq!(c, want);

        // aᵀ · b with a pre-transposed likewise.
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for j in 0..k {
                at[j * m + i] = a[i * k + j];
            }
        }
        let mut c = vec![0.0; m * n];
        matmul_tn_acc(&mut c, &at, &b, m, k, n);
        assert_eq!(c, want);
    }
}
