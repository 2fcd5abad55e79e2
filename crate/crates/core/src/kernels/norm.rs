use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Real;

pub struct BatchNormOut<R> {
    pub y: Vec<R>,
    pub xhat: Vec<R>,
    pub inv_std: Vec<R>,
    pub mean: Vec<R>,
    /// Biased batch variance.
    pub var: Vec<R>,
}

/// Training-mode batch norm over `[M, C]` (every leading axis is reduced).
pub fn batch_norm_train<R: Real>(x: &[R], c: usize, gamma: &[R], beta: &[R], eps: R) -> BatchNormOut<R> {
    let m = x.len() / c;
    let inv_m = R::one() / R::from_usize(m);
    let mut mean = vec![R::zero(); c];
    for row in x.chunks_exact(c) {
        for (acc, &v) in mean.iter_mut().zip(row) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v *= inv_m);
    let mut var = vec![R::zero(); c];
    for row in x.chunks_exact(c) {
        for ((acc, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - mu;
            *acc += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v *= inv_m);
    let inv_std: Vec<R> = var.iter().map(|&v| R::one() / (v + eps).sqrt()).collect();
    let mut xhat = Vec::with_capacity(x.len());
    let mut y = Vec::with_capacity(x.len());
    for row in x.chunks_exact(c) {
        for ch in 0..c {
            let xh = (row[ch] - mean[ch]) * inv_std[ch];
            xhat.push(xh);
            y.push(gamma[ch] * xh + beta[ch]);
        }
    }
    BatchNormOut {
        y,
        xhat,
        inv_std,
        mean,
        var,
    }
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_train_backward<R: Real>(
    dy: &[R],
    xhat: &[R],
    inv_std: &[R],
    gamma: &[R],
) -> (Vec<R>, Vec<R>, Vec<R>) {
    let c = gamma.len();
    let m = R::from_usize(dy.len() / c);
    let mut dgamma = vec![R::zero(); c];
    let mut dbeta = vec![R::zero(); c];
    for (drow, xrow) in dy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
        for ch in 0..c {
            dbeta[ch] += drow[ch];
            dgamma[ch] += drow[ch] * xrow[ch];
        }
    }
    // Σ dxhat = γ·Σdy and Σ dxhat·xhat = γ·Σ dy·xhat
    let mut dx = Vec::with_capacity(dy.len());
    for (drow, xrow) in dy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
        for ch in 0..c {
            let k = gamma[ch] * inv_std[ch] / m;
            dx.push(k * (m * drow[ch] - dbeta[ch] - xrow[ch] * dgamma[ch]));
        }
    }
    (dx, dgamma, dbeta)
}

#[inline]
fn block<R: Copy>(row: &[R], g: usize, gs: usize) -> impl Iterator<Item = R> + '_ {
    row[g * gs..(g + 1) * gs].iter().copied()
}

/// Group normalization without affine transform on `[B, M, Ch]`: each batch
/// item's channels are split into `groups` contiguous blocks and each block
/// is standardized over all of its `M · Ch/groups` entries.
/// Returns `(y, inv_std)` with `inv_std` laid out `[B, groups]`; `y` doubles
/// as the saved normalized input.
pub fn group_norm<R: Real>(x: &[R], batch: usize, ch: usize, groups: usize, eps: R) -> (Vec<R>, Vec<R>) {
    let per_item = x.len() / batch;
    let m = per_item / ch;
    let gs = ch / groups;
    let count = R::from_usize(m * gs);
    let mut y = vec![R::zero(); x.len()];
    let mut inv_std = vec![R::zero(); batch * groups];
    for b in 0..batch {
        let item = &x[b * per_item..(b + 1) * per_item];
        for g in 0..groups {
            let mut mean = R::zero();
            for row in item.chunks_exact(ch) {
                mean += block(row, g, gs).sum::<R>();
            }
            mean = mean / count;
            let mut var = R::zero();
            for row in item.chunks_exact(ch) {
                for v in block(row, g, gs) {
                    var += (v - mean) * (v - mean);
                }
            }
            var = var / count;
            let is = R::one() / (var + eps).sqrt();
            inv_std[b * groups + g] = is;
            for (p, row) in item.chunks_exact(ch).enumerate() {
                for (k, v) in block(row, g, gs).enumerate() {
                    y[b * per_item + p * ch + g * gs + k] = (v - mean) * is;
                }
            }
        }
    }
    (y, inv_std)
}

pub fn group_norm_backward<R: Real>(dy: &[R], y: &[R], inv_std: &[R], batch: usize, ch: usize, groups: usize) -> Vec<R> {
    let per_item = dy.len() / batch;
    let m = per_item / ch;
    let gs = ch / groups;
    let count = R::from_usize(m * gs);
    let mut dx = vec![R::zero(); dy.len()];
    for b in 0..batch {
        for g in 0..groups {
            let mut sum_dy = R::zero();
            let mut sum_dy_y = R::zero();
            for p in 0..m {
                for k in 0..gs {
                    let i = b * per_item + p * ch + g * gs + k;
                    sum_dy += dy[i];
                    sum_dy_y += dy[i] * y[i];
                }
            }
            let scale = inv_std[b * groups + g] / count;
            for p in 0..m {
                for k in 0..gs {
                    let i = b * per_item + p * ch + g * gs + k;
                    dx[i] = scale * (count * dy[i] - sum_dy - y[i] * sum_dy_y);
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_group_normalizes_to_zero() {
        let x = vec![3.5f64; 2 * 3 * 4];
        let (y, _) = group_norm(&x, 2, 4, 2, 1e-5);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_standardizes_channels() {
        let x: Vec<f64> = (0..20).map(|i| (i * i % 7) as f64).collect();
        let out = batch_norm_train(&x, 2, &[1.0, 1.0], &[0.0, 0.0], 1e-5);
        for ch in 0..2 {
            let col: Vec<f64> = out.y.iter().skip(ch).step_by(2).copied().collect();
            let mean: f64 = col.iter().sum::<f64>() / 10.0;
            let var: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 10.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }
}
