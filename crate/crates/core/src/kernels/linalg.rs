use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Real;

/// `C[m×n] = A[m×k] · B[k×n]`.
pub fn matmul<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize) -> Vec<R> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![R::zero(); m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == R::zero() {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `dA = dC · Bᵀ`.
pub fn matmul_grad_lhs<R: Real>(dc: &[R], b: &[R], m: usize, k: usize, n: usize) -> Vec<R> {
    let mut da = vec![R::zero(); m * k];
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for t in 0..k {
            let brow = &b[t * n..(t + 1) * n];
            let mut acc = R::zero();
            for (&d, &bv) in drow.iter().zip(brow) {
                acc += d * bv;
            }
            da[i * k + t] = acc;
        }
    }
    da
}

/// `dB = Aᵀ · dC`.
pub fn matmul_grad_rhs<R: Real>(a: &[R], dc: &[R], m: usize, k: usize, n: usize) -> Vec<R> {
    let mut db = vec![R::zero(); k * n];
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            let dbrow = &mut db[t * n..(t + 1) * n];
            for (g, &d) in dbrow.iter_mut().zip(drow) {
                *g += av * d;
            }
        }
    }
    db
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_left_factor() {
        let c = matmul(&[1.0f64, 0.0, 0.0, 1.0], &[3.0, 4.0, 5.0, 6.0], 2, 2, 2);
        assert_eq!(c, vec![3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn column_vector_product() {
        let c = matmul(&[1.0f64, 2.0, 3.0, 4.0], &[5.0, 6.0], 2, 2, 1);
        assert_eq!(c, vec![17.0, 39.0]);
    }
}
