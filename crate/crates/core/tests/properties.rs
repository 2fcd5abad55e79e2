use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vtn_core::kernels::norm::group_norm;
use vtn_core::kernels::softmax::softmax;
use vtn_core::nn::{Ctx, Mode};
use vtn_core::param::ParamStore;
use vtn_core::sampler::{bilinear_sample, WarpField};
use vtn_core::tape::Tape;
use vtn_core::vtn::ops::candidate_count;
use vtn_core::vtn::{vtn_forward, VtnConfig, VtnParams};
use vtn_core::Tensor;

#[derive(Clone, Debug)]
struct Instance {
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    r: usize,
    beta: f64,
    u: Vec<f64>,
    e: Vec<f64>,
}

fn instance() -> impl Strategy<Value = Instance> {
    (1usize..=8, 1usize..=8, 1usize..=4, 1usize..=3, 0usize..=2, 0.5f64..20.0)
        .prop_flat_map(|(h, w, c, m, r, beta)| {
            let k = c * m;
            let n = candidate_count(r);
            (
                Just((h, w, c, k, r, beta)),
                prop::collection::vec(-3.0f64..3.0, h * w * k),
                prop::collection::vec(-5.0f64..5.0, c * h * w * n),
            )
        })
        .prop_map(|((h, w, c, k, r, beta), u, e)| Instance { h, w, c, k, r, beta, u, e })
}

/// Probabilities `[1,C,H,W,N]` and fields `[1,C,H,W,2]`.
fn probs_and_field(x: &Instance, u: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut tape = Tape::<f64>::new();
    let uv = tape.constant(Tensor::new(&[1, x.h, x.w, x.k], u.to_vec()).unwrap());
    let pooled = tape.group_pool(uv, x.c).unwrap();
    let n = candidate_count(x.r);
    let ev = tape.constant(Tensor::new(&[1, x.c, x.h, x.w, n], x.e.clone()).unwrap());
    let p = tape.candidate_probs(ev, pooled, x.r, x.beta).unwrap();
    let g = tape.aggregate_field(p, x.r).unwrap();
    (tape.value(p).data().to_vec(), tape.value(g).data().to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn probabilities_sum_to_one(x in instance()) {
        let (p, _) = probs_and_field(&x, &x.u);
        for row in p.chunks(candidate_count(x.r)) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6, "sum {}", s);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn field_stays_within_radius(x in instance()) {
        let (_, g) = probs_and_field(&x, &x.u);
        prop_assert!(g.iter().all(|v| v.abs() <= x.r as f64));
    }

    #[test]
    fn within_group_permutation_leaves_p_and_g(x in instance(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gs = x.k / x.c;
        let grp = (seed as usize) % x.c;
        let mut perm: Vec<usize> = (0..gs).collect();
        perm.shuffle(&mut rng);
        let mut u2 = x.u.clone();
        for px in 0..x.h * x.w {
            for (dst, &src) in perm.iter().enumerate() {
                u2[px * x.k + grp * gs + dst] = x.u[px * x.k + grp * gs + src];
            }
        }
        let (p1, g1) = probs_and_field(&x, &x.u);
        let (p2, g2) = probs_and_field(&x, &u2);
        for (a, b) in p1.iter().zip(&p2).chain(g1.iter().zip(&g2)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(v in prop::collection::vec(-50.0f64..50.0, 1..40), beta in 0.1f64..10.0) {
        let y = softmax(&v, 1, v.len(), 1, beta);
        prop_assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn group_norm_standardises_each_group(
        (groups, per, m, data) in (1usize..4, 1usize..4, 1usize..6)
            .prop_flat_map(|(g, p, m)| (Just(g), Just(p), Just(m), prop::collection::vec(-4.0f64..4.0, 2 * m * g * p)))
    ) {
        let ch = groups * per;
        let (y, _) = group_norm(&data, 2, ch, groups, 1e-5);
        for b in 0..2 {
            for g in 0..groups {
                let vals: Vec<f64> = (0..m)
                    .flat_map(|i| (0..per).map(move |j| (i, j)))
                    .map(|(i, j)| y[b * m * ch + i * ch + g * per + j])
                    .collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
                prop_assert!(mean.abs() < 1e-10);
                prop_assert!(var < 1.0 + 1e-10);
            }
        }
    }

    #[test]
    fn zero_field_is_bit_exact_identity(
        (h, w, data) in (1usize..8, 1usize..8).prop_flat_map(|(h, w)| (Just(h), Just(w), prop::collection::vec(-1e6f64..1e6, h * w)))
    ) {
        let u = Tensor::new(&[h, w], data).unwrap();
        let v = bilinear_sample(&u, &WarpField::zeros(h, w)).unwrap();
        prop_assert_eq!(v.data(), u.data());
    }
}

fn zero_head_layer(groups: usize, radius: usize, seed: u64) -> (ParamStore<f64>, VtnParams) {
    let cfg = VtnConfig {
        radius,
        ..VtnConfig::new(groups)
    };
    let mut store = ParamStore::new();
    let params = VtnParams::new(&mut store, "vtn", &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
    (store, params)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn zero_head_gives_zero_logits_and_constant_input_passes_unchanged(
        c in 1usize..=4,
        r in 1usize..=2,
        side in prop::sample::select(vec![4usize, 8]),
        value in -10.0f64..10.0,
        noise in prop::collection::vec(-1.0f64..1.0, 8 * 8 * 8),
        seed in any::<u64>(),
    ) {
        let k = 2 * c;
        let (store, params) = zero_head_layer(c, r, seed);
        // random input: head output is exactly zero
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::new(&[1, side, side, k], noise[..side * side * k].to_vec()).unwrap());
        let mut ctx = Ctx::new(&mut tape, Mode::Eval);
        let out = vtn_forward(&mut ctx, &store, &params, u).unwrap();
        prop_assert!(tape.value(out.logits).data().iter().all(|&e| e == 0.0));
        // constant input: identity warp, bit for bit
        let mut tape = Tape::new();
        let cst = Tensor::full(&[1, side, side, k], value);
        let u = tape.constant(cst.clone());
        let mut ctx = Ctx::new(&mut tape, Mode::Eval);
        let out = vtn_forward(&mut ctx, &store, &params, u).unwrap();
        prop_assert_eq!(tape.value(out.warped).data(), cst.data());
    }
}
