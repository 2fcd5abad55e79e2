use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Real;

/// 2×2 max pooling with stride 2 on `[N, H, W, C]`. Returns the pooled values
/// and, per output element, the flat input index of the winner (first
/// maximum in row-major window order).
pub fn maxpool2<R: Real>(x: &[R], n: usize, h: usize, w: usize, c: usize) -> (Vec<R>, Vec<u32>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * ho * wo * c);
    let mut arg = Vec::with_capacity(n * ho * wo * c);
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let mut best_i = ((b * h + 2 * oy) * w + 2 * ox) * c + ch;
                    let mut best = x[best_i];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                    out.push(best);
                    arg.push(best_i as u32);
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<R: Real>(dout: &[R], arg: &[u32], in_len: usize) -> Vec<R> {
    let mut dx = vec![R::zero(); in_len];
    for (&d, &i) in dout.iter().zip(arg) {
        dx[i as usize] += d;
    }
    dx
}

/// Nearest-neighbour ×2 upsampling on `[N, H, W, C]`.
pub fn upsample2<R: Real>(x: &[R], n: usize, h: usize, w: usize, c: usize) -> Vec<R> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![R::zero(); n * ho * wo * c];
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let src = ((b * h + oy / 2) * w + ox / 2) * c;
                let dst = ((b * ho + oy) * wo + ox) * c;
                out[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
    }
    out
}

pub fn upsample2_backward<R: Real>(dout: &[R], n: usize, h: usize, w: usize, c: usize) -> Vec<R> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut dx = vec![R::zero(); n * h * w * c];
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let src = ((b * ho + oy) * wo + ox) * c;
                let dst = ((b * h + oy / 2) * w + ox / 2) * c;
                for ch in 0..c {
                    dx[dst + ch] += dout[src + ch];
                }
            }
        }
    }
    dx
}
