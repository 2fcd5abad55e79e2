//! Kernels for the grouped-response, candidate-probability and
//! expected-offset stages.
//!
//! Layouts: features `[B,H,W,K]`, pooled responses `[B,H,W,C,2]` holding
//! `(max, avg)` per group, logits/probabilities `[B,C,H,W,N]` with the
//! candidate axis innermost, fields `[B,C,H,W,2]`.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Real;

/// Candidate offsets of a `(2r+1)²` window in row-major order:
/// index `n = (dy + r)(2r + 1) + (dx + r)`.
pub fn window_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut v = Vec::with_capacity((2 * radius + 1) * (2 * radius + 1));
    for dy in -r..=r {
        for dx in -r..=r {
            v.push((dy, dx));
        }
    }
    v
}

pub fn candidate_count(radius: usize) -> usize {
    (2 * radius + 1) * (2 * radius + 1)
}

/// Channel-wise max and mean over contiguous groups. Returns the pooled
/// `[B,H,W,C,2]` buffer and the winning channel per `(b,h,w,c)`.
pub fn group_pool<R: Real>(u: &[R], k: usize, groups: usize) -> (Vec<R>, Vec<u32>) {
    let gs = k / groups;
    let inv = R::one() / R::from_usize(gs);
    let pixels = u.len() / k;
    let mut out = Vec::with_capacity(pixels * groups * 2);
    let mut arg = Vec::with_capacity(pixels * groups);
    for px in u.chunks_exact(k) {
        for c in 0..groups {
            let grp = &px[c * gs..(c + 1) * gs];
            let mut best = 0;
            let mut sum = R::zero();
            for (i, &v) in grp.iter().enumerate() {
                if v > grp[best] {
                    best = i;
                }
                sum += v;
            }
            out.push(grp[best]);
            out.push(sum * inv);
            arg.push((c * gs + best) as u32);
        }
    }
    (out, arg)
}

pub fn group_pool_backward<R: Real>(dout: &[R], arg: &[u32], k: usize, groups: usize) -> Vec<R> {
    let gs = k / groups;
    let inv = R::one() / R::from_usize(gs);
    let pixels = arg.len() / groups;
    let mut du = vec![R::zero(); pixels * k];
    for p in 0..pixels {
        for c in 0..groups {
            let o = (p * groups + c) * 2;
            du[p * k + arg[p * groups + c] as usize] += dout[o];
            let davg = dout[o + 1] * inv;
            for ch in c * gs..(c + 1) * gs {
                du[p * k + ch] += davg;
            }
        }
    }
    du
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CandidateGeom {
    pub batch: usize,
    pub groups: usize,
    pub h: usize,
    pub w: usize,
    pub radius: usize,
}

impl CandidateGeom {
    pub fn candidates(&self) -> usize {
        candidate_count(self.radius)
    }

    #[inline]
    fn neighbour(&self, row: usize, col: usize, dy: isize, dx: isize) -> Option<(usize, usize)> {
        let y = row as isize + dy;
        let x = col as isize + dx;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }
}

/// `P_c(i, j) = softmax_j((Umax_c(j) + Uavg_c(j) + E_c(i, j)) / β)` with
/// out-of-image candidates fixed at probability 0.
pub fn candidate_probs<R: Real>(g: &CandidateGeom, logits: &[R], pooled: &[R], beta: R) -> Vec<R> {
    let offs = window_offsets(g.radius);
    let n = offs.len();
    let mut p = vec![R::zero(); logits.len()];
    let mut z = vec![R::zero(); n];
    for b in 0..g.batch {
        for c in 0..g.groups {
            for row in 0..g.h {
                for col in 0..g.w {
                    let base = (((b * g.groups + c) * g.h + row) * g.w + col) * n;
                    let mut mx = R::neg_infinity();
                    for (t, &(dy, dx)) in offs.iter().enumerate() {
                        z[t] = match g.neighbour(row, col, dy, dx) {
                            Some((y, x)) => {
                                let pi = (((b * g.h + y) * g.w + x) * g.groups + c) * 2;
                                (pooled[pi] + pooled[pi + 1] + logits[base + t]) / beta
                            }
                            None => R::neg_infinity(),
                        };
                        mx = mx.max(z[t]);
                    }
                    let mut sum = R::zero();
                    for t in 0..n {
                        if z[t] != R::neg_infinity() {
                            let e = (z[t] - mx).exp();
                            p[base + t] = e;
                            sum += e;
                        }
                    }
                    for t in 0..n {
                        p[base + t] /= sum;
                    }
                }
            }
        }
    }
    p
}

/// Returns `(dlogits, dpooled)`.
pub fn candidate_probs_backward<R: Real>(g: &CandidateGeom, p: &[R], dp: &[R], beta: R) -> (Vec<R>, Vec<R>) {
    let offs = window_offsets(g.radius);
    let n = offs.len();
    let mut de = vec![R::zero(); p.len()];
    let mut dpooled = vec![R::zero(); g.batch * g.h * g.w * g.groups * 2];
    for b in 0..g.batch {
        for c in 0..g.groups {
            for row in 0..g.h {
                for col in 0..g.w {
                    let base = (((b * g.groups + c) * g.h + row) * g.w + col) * n;
                    let dot: R = (0..n).map(|t| p[base + t] * dp[base + t]).sum();
                    for (t, &(dy, dx)) in offs.iter().enumerate() {
                        let Some((y, x)) = g.neighbour(row, col, dy, dx) else { continue };
                        let dz = p[base + t] * (dp[base + t] - dot) / beta;
                        de[base + t] = dz;
                        let pi = (((b * g.h + y) * g.w + x) * g.groups + c) * 2;
                        dpooled[pi] += dz;
                        dpooled[pi + 1] += dz;
                    }
                }
            }
        }
    }
    (de, dpooled)
}

/// Expected offset `G_c(i) = Σ_j P_c(i, j)(j − i)`.
pub fn aggregate_field<R: Real>(p: &[R], radius: usize) -> Vec<R> {
    let offs = window_offsets(radius);
    let n = offs.len();
    let mut out = Vec::with_capacity(p.len() / n * 2);
    for probs in p.chunks_exact(n) {
        let mut gy = R::zero();
        let mut gx = R::zero();
        for (&pr, &(dy, dx)) in probs.iter().zip(&offs) {
            gy += pr * R::from_f64(dy as f64);
            gx += pr * R::from_f64(dx as f64);
        }
        // a convex combination cannot leave [-r, r]; the clamp only absorbs rounding
        let r = R::from_usize(radius);
        out.push(gy.max(-r).min(r));
        out.push(gx.max(-r).min(r));
    }
    out
}

pub fn aggregate_field_backward<R: Real>(dg: &[R], radius: usize) -> Vec<R> {
    let offs = window_offsets(radius);
    let mut dp = Vec::with_capacity(dg.len() / 2 * offs.len());
    for d in dg.chunks_exact(2) {
        for &(dy, dx) in &offs {
            dp.push(d[0] * R::from_f64(dy as f64) + d[1] * R::from_f64(dx as f64));
        }
    }
    dp
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_are_row_major_and_centered() {
        let o = window_offsets(1);
        assert_eq!(o.len(), 9);
        assert_eq!(o[0], (-1, -1));
        assert_eq!(o[4], (0, 0));
        assert_eq!(o[5], (0, 1));
    }

    #[test]
    fn pair_max_and_mean() {
        let (out, arg) = group_pool(&[1.0f64, 3.0], 2, 1);
        assert_eq!(out, vec![3.0, 2.0]);
        assert_eq!(arg, vec![1]);
    }

    #[test]
    fn point_masses_give_their_offset() {
        let n = candidate_count(2);
        let mut p = vec![0.0f64; n];
        p[(2 + 2) * 5 + (1 + 2)] = 1.0;
        assert_eq!(aggregate_field(&p, 2), vec![2.0, 1.0]);
        let mut center = vec![0.0f64; n];
        center[12] = 1.0;
        assert_eq!(aggregate_field(&center, 2), vec![0.0, 0.0]);
        let uniform = vec![1.0 / n as f64; n];
        let g = aggregate_field(&uniform, 2);
        assert!(g[0].abs() < 1e-15 && g[1].abs() < 1e-15);
    }
}
