//! Row-major matrix products. Each output row is produced by exactly one
//! task with a fixed inner summation order, so the parallel and serial
//! paths agree bit for bit.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// Total-work threshold below which threading overhead dominates.
const PAR_FLOP_CUTOFF: usize = 1 << 17;

/// Minimum per-row work for the parallel path; rows cheaper than this
/// are better done serially than scheduled.
const PAR_ROW_CUTOFF: usize = 512;

#[inline]
fn go_parallel(total: usize, per_row: usize) -> bool {
    total >= PAR_FLOP_CUTOFF && per_row >= PAR_ROW_CUTOFF
}

#[inline]
fn axpy<T: Scalar>(acc: &mut [T], s: T, row: &[T]) {
    for (a, &b) in acc.iter_mut().zip(row.iter()) {
        *a = *a + s * b;
    }
}

/// C(m,n) = A(m,k) * B(k,n)
pub fn matmul<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row_job = |(i, crow): (usize, &mut [T])| {
        crow.fill(T::zero());
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            axpy(crow, av, &b[kk * n..(kk + 1) * n]);
        }
    };
    if go_parallel(m * k * n, k * n) {
        c.par_chunks_mut(n).enumerate().for_each(row_job);
    } else {
        c.chunks_mut(n).enumerate().for_each(row_job);
    }
}

/// C(m,k) = A(m,n) * B(k,n)^T
///
/// B is transposed up front (it is a weight matrix, small next to A) so
/// the product runs through the same contiguous-axpy loop as `matmul`.
pub fn matmul_a_bt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    let mut bt = vec![T::zero(); n * k];
    for j in 0..k {
        for i in 0..n {
            bt[i * k + j] = b[j * n + i];
        }
    }
    matmul(a, &bt, c, m, n, k);
}

/// C(k,n) = A(m,k)^T * B(m,n)
pub fn matmul_at_b<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    let row_job = |(j, crow): (usize, &mut [T])| {
        crow.fill(T::zero());
        for i in 0..m {
            axpy(crow, a[i * k + j], &b[i * n..(i + 1) * n]);
        }
    };
    if go_parallel(m * k * n, m * n) {
        c.par_chunks_mut(n).enumerate().for_each(row_job);
    } else {
        c.chunks_mut(n).enumerate().for_each(row_job);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for kk in 0..k {
                    c[i * n + j] += a[i * k + kk] * b[kk * n + j];
                }
            }
        }
        c
    }

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random::<f64>() - 0.5).collect()
    }

    #[test]
    fn variants_agree_with_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for &(m, k, n) in &[(3, 4, 5), (17, 9, 33), (64, 32, 64), (200, 16, 48)] {
            let a = rand_vec(m * k, &mut rng);
            let b = rand_vec(k * n, &mut rng);
            let want = naive(&a, &b, m, k, n);

            let mut c = vec![0.0; m * n];
            matmul(&a, &b, &mut c, m, k, n);
            for (x, y) in c.iter().zip(want.iter()) {
                assert!((x - y).abs() < 1e-12);
            }

            // A*B == (A) * (B^T)^T through the bt kernel
            let mut bt = vec![0.0; k * n];
            for kk in 0..k {
                for j in 0..n {
                    bt[j * k + kk] = b[kk * n + j];
                }
            }
            let mut c2 = vec![0.0; m * n];
            matmul_a_bt(&a, &bt, &mut c2, m, k, n);
            for (x, y) in c2.iter().zip(want.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn at_b_matches_naive_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (m, k, n) = (40, 7, 13);
        let a = rand_vec(m * k, &mut rng);
        let b = rand_vec(m * n, &mut rng);
        let mut c = vec![0.0; k * n];
        matmul_at_b(&a, &b, &mut c, m, k, n);
        for j in 0..k {
            for jj in 0..n {
                let mut want = 0.0;
                for i in 0..m {
                    want += a[i * k + j] * b[i * n + jj];
                }
                assert!((c[j * n + jj] - want).abs() < 1e-12);
            }
        }
    }
}
