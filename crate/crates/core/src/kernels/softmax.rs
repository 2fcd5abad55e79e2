use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Real;

/// `softmax(x / beta)` along an axis described as `[outer, len, inner]`.
pub fn softmax<R: Real>(x: &[R], outer: usize, len: usize, inner: usize, beta: R) -> Vec<R> {
    let mut y = vec![R::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let mut mx = R::neg_infinity();
            for k in 0..len {
                mx = mx.max(x[at(k)] / beta);
            }
            let mut z = R::zero();
            for k in 0..len {
                let e = (x[at(k)] / beta - mx).exp();
                y[at(k)] = e;
                z += e;
            }
            for k in 0..len {
                y[at(k)] /= z;
            }
        }
    }
    y
}

pub fn softmax_backward<R: Real>(dy: &[R], y: &[R], outer: usize, len: usize, inner: usize, beta: R) -> Vec<R> {
    let mut dx = vec![R::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let dot: R = (0..len).map(|k| y[at(k)] * dy[at(k)]).sum();
            for k in 0..len {
                dx[at(k)] = y[at(k)] * (dy[at(k)] - dot) / beta;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_logits_give_uniform() {
        for beta in [0.1, 1.0, 10.0] {
            let y = softmax(&[2.0f64; 5], 1, 5, 1, beta);
            assert!(y.iter().all(|&p| (p - 0.2).abs() < 1e-15));
        }
    }

    #[test]
    fn closed_form_two_way() {
        let beta = 10.0f64;
        let y = softmax(&[0.0, beta * 2f64.ln()], 1, 2, 1, beta);
        // exp(0)=1, exp(ln 2)=2
        assert!((y[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((y[1] - 2.0 / 3.0).abs() < 1e-15);
    }
}
