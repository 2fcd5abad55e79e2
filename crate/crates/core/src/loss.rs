//! Task loss, consistency losses and the total objective.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Real;

pub mod kernels {
    use alloc::vec;
    use alloc::vec::Vec;

    use crate::tensor::Real;

    /// Mean cross-entropy over rows of `[B, k]` logits. Also returns the
    /// softmax probabilities for the backward pass.
    pub fn cross_entropy<R: Real>(logits: &[R], k: usize, labels: &[usize]) -> (R, Vec<R>) {
        let mut probs = Vec::with_capacity(logits.len());
        let mut total = R::zero();
        for (row, &label) in logits.chunks_exact(k).zip(labels) {
            let (arg, mx) = row
                .iter()
                .enumerate()
                .fold((0, R::neg_infinity()), |(ai, am), (i, &v)| if v > am { (i, v) } else { (ai, am) });
            // lse - mx = ln(1 + Σ_{i≠arg} e^{x_i - mx}); ln_1p keeps tiny losses accurate
            let rest: R = row
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != arg)
                .map(|(_, &v)| (v - mx).exp())
                .sum();
            let lse_shift = rest.ln_1p();
            total += lse_shift - (row[label] - mx);
            let z = R::one() + rest;
            probs.extend(row.iter().map(|&v| (v - mx).exp() / z));
        }
        (total / R::from_usize(labels.len()), probs)
    }

    pub fn cross_entropy_backward<R: Real>(probs: &[R], labels: &[usize], upstream: R) -> Vec<R> {
        let k = probs.len() / labels.len();
        let scale = upstream / R::from_usize(labels.len());
        let mut d: Vec<R> = probs.iter().map(|&p| p * scale).collect();
        for (i, &l) in labels.iter().enumerate() {
            d[i * k + l] -= scale;
        }
        d
    }

    #[inline]
    fn margins<'a, R: Real>(a: &'a [R], p: &'a [R], n: &'a [R], ch: usize, alpha: R) -> impl Iterator<Item = R> + 'a {
        a.chunks_exact(ch)
            .zip(p.chunks_exact(ch))
            .zip(n.chunks_exact(ch))
            .map(move |((va, vp), vn)| {
                let mut dpos = R::zero();
                let mut dneg = R::zero();
                for i in 0..ch {
                    dpos += (va[i] - vp[i]) * (va[i] - vp[i]);
                    dneg += (va[i] - vn[i]) * (va[i] - vn[i]);
                }
                dpos - dneg + alpha
            })
    }

    pub fn triplet_hinge<R: Real>(a: &[R], p: &[R], n: &[R], ch: usize, alpha: R) -> R {
        margins(a, p, n, ch, alpha).filter(|&m| m > R::zero()).sum()
    }

    /// Returns `(da, dp, dn)`; inactive pixels (margin ≤ 0) get zero.
    pub fn triplet_hinge_backward<R: Real>(
        a: &[R],
        p: &[R],
        n: &[R],
        ch: usize,
        alpha: R,
        upstream: R,
    ) -> (Vec<R>, Vec<R>, Vec<R>) {
        let two = upstream + upstream;
        let mut da = vec![R::zero(); a.len()];
        let mut dp = vec![R::zero(); a.len()];
        let mut dn = vec![R::zero(); a.len()];
        for (px, m) in margins(a, p, n, ch, alpha).enumerate() {
            if m <= R::zero() {
                continue;
            }
            for i in px * ch..(px + 1) * ch {
                da[i] = two * (n[i] - p[i]);
                dp[i] = -two * (a[i] - p[i]);
                dn[i] = two * (a[i] - n[i]);
            }
        }
        (da, dp, dn)
    }
}

/// Mean cross-entropy of `[B, k]` logits against integer labels.
pub fn cross_entropy<R: Real>(tape: &mut Tape<R>, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

/// `Σ_i [‖V(i)−V'(i)‖² − ‖V(i)−V''(i)‖² + α]_+` over the pixels of
/// channels-last feature maps.
pub fn consistency_triplet_loss<R: Real>(tape: &mut Tape<R>, v: Var, v_pos: Var, v_neg: Var, alpha: R) -> Result<Var> {
    tape.triplet_hinge(v, v_pos, v_neg, alpha)
}

/// Plain pairwise square loss `Σ_i ‖V(i)−V'(i)‖²`. Kept only to demonstrate
/// that it is minimized by constant features; never used for training.
pub fn square_consistency_loss<R: Real>(tape: &mut Tape<R>, v: Var, v_pos: Var) -> Result<Var> {
    let d = tape.sub(v, v_pos)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.sum(sq))
}

/// `task + λ·cons`.
pub fn total_loss<R: Real>(tape: &mut Tape<R>, task: Var, cons: Var, lambda: R) -> Result<Var> {
    if lambda < R::zero() {
        return Err(Error::config("lambda must be >= 0"));
    }
    let weighted = tape.scale(cons, lambda);
    tape.add(task, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn uniform_logits_cost_ln_k() {
        let mut t = Tape::<f64>::new();
        let l = t.constant(Tensor::zeros(&[3, 4]));
        let ce = cross_entropy(&mut t, l, &[0, 1, 3]).unwrap();
        assert!((t.value(ce).item().unwrap() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_logits_cost_is_tiny_but_exact() {
        let mut t = Tape::<f64>::new();
        let l = t.constant(Tensor::from_f64(&[1, 2], &[10.0, -10.0]).unwrap());
        let ce = cross_entropy(&mut t, l, &[0]).unwrap();
        // ln(1 + e^-20)
        let expected = (-20f64).exp().ln_1p();
        let got = t.value(ce).item().unwrap();
        assert!((got - expected).abs() / expected < 1e-12);
        assert!((got - 2.06e-9).abs() < 1e-11);
    }

    #[test]
    fn label_out_of_range_is_data_error() {
        let mut t = Tape::<f64>::new();
        let l = t.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(cross_entropy(&mut t, l, &[3]), Err(Error::Data(_))));
    }

    fn maps(t: &mut Tape<f64>, vals: [&[f64]; 3], shape: &[usize]) -> [Var; 3] {
        vals.map(|v| t.leaf(Tensor::from_f64(shape, v).unwrap(), true))
    }

    #[test]
    fn identical_maps_saturate_at_alpha_per_pixel() {
        let mut t = Tape::<f64>::new();
        let z = [0.3; 2 * 3 * 4];
        let [a, p, n] = maps(&mut t, [&z, &z, &z], &[2, 3, 4]);
        let l = consistency_triplet_loss(&mut t, a, p, n, 0.7).unwrap();
        assert!((t.value(l).item().unwrap() - 0.7 * 6.0).abs() < 1e-12);
    }

    #[test]
    fn separated_negatives_deactivate_hinge() {
        let mut t = Tape::<f64>::new();
        let [a, p, n] = maps(&mut t, [&[0.0, 0.0], &[0.1, 0.0], &[5.0, 5.0]], &[1, 2, 1]);
        let l = consistency_triplet_loss(&mut t, a, p, n, 1.0).unwrap();
        assert_eq!(t.value(l).item().unwrap(), 0.0);
        let g = t.backward(l).unwrap();
        assert!(g.get(a).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_evaluated_two_by_two() {
        let mut t = Tape::<f64>::new();
        let [a, p, n] = maps(
            &mut t,
            [&[0.0, 0.0, 0.0, 0.0], &[1.0, 0.0, 0.0, 0.0], &[3.0, 0.0, 0.0, 0.0]],
            &[2, 2, 1],
        );
        let l = consistency_triplet_loss(&mut t, a, p, n, 1.0).unwrap();
        assert_eq!(t.value(l).item().unwrap(), 3.0);
    }

    #[test]
    fn non_positive_margin_rejected() {
        let mut t = Tape::<f64>::new();
        let [a, p, n] = maps(&mut t, [&[0.0], &[0.0], &[0.0]], &[1, 1]);
        assert!(matches!(consistency_triplet_loss(&mut t, a, p, n, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn total_is_weighted_sum() {
        let mut t = Tape::<f64>::new();
        let task = t.leaf(Tensor::scalar(2.0), true);
        let cons = t.leaf(Tensor::scalar(3.0), true);
        let tot = total_loss(&mut t, task, cons, 1.0).unwrap();
        assert_eq!(t.value(tot).item().unwrap(), 5.0);
        let only_task = total_loss(&mut t, task, cons, 0.0).unwrap();
        assert_eq!(t.value(only_task).item().unwrap(), 2.0);
    }
}
