use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vtn_core::loss::{consistency_triplet_loss, cross_entropy, total_loss};
use vtn_core::model::{build_model, Model, ModelSpec, Variant};
use vtn_core::nn::Mode;
use vtn_core::tape::Tape;
use vtn_core::vtn::{HeadKind, VtnConfig};
use vtn_core::Tensor;

fn images(b: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[b, 32, 32, 1], |_| rng.gen_range(0.0..1.0))
}

fn logits(model: &mut Model<f64>, x: &Tensor<f64>) -> Vec<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = model.forward(&mut tape, xv, Mode::Eval).unwrap();
    tape.value(out.logits).data().to_vec()
}

#[test]
fn zeroed_direct_head_makes_all_variants_agree() {
    let x = images(3, 11);
    let direct = |groups| VtnConfig {
        head: HeadKind::Direct,
        ..VtnConfig::new(groups)
    };
    let mut base = build_model::<f64>(&ModelSpec::new(Variant::Base, 10, 5), None).unwrap();
    let mut stn = build_model::<f64>(&ModelSpec::new(Variant::StnStyle, 10, 5), Some(&direct(1))).unwrap();
    let mut vtn = build_model::<f64>(&ModelSpec::new(Variant::Vtn, 10, 5), Some(&direct(8))).unwrap();
    let want = logits(&mut base, &x);
    assert_eq!(logits(&mut stn, &x), want);
    assert_eq!(logits(&mut vtn, &x), want);
}

#[test]
fn stn_style_differs_from_vtn_only_in_group_widths() {
    let stn = build_model::<f64>(&ModelSpec::new(Variant::StnStyle, 10, 0), Some(&VtnConfig::new(1))).unwrap();
    let vtn = build_model::<f64>(&ModelSpec::new(Variant::Vtn, 10, 0), Some(&VtnConfig::new(8))).unwrap();
    let names = |m: &Model<f64>| m.store.iter().map(|p| p.name.clone()).collect::<Vec<_>>();
    assert_eq!(names(&stn), names(&vtn));
    // only the mixing matrices see the group count: 1x1 for a single field
    let mixing = [("enc1.squeeze", [8, 4]), ("enc2.squeeze", [4, 2]), ("dec1.expand", [2, 4]), ("dec2.expand", [4, 8])];
    for (a, b) in stn.store.iter().zip(vtn.store.iter()) {
        match mixing.iter().find(|(n, _)| a.name.ends_with(n)) {
            Some((_, want)) => {
                assert_eq!(a.value.shape(), &[1, 1]);
                assert_eq!(b.value.shape(), want);
            }
            None => assert_eq!(a.value.shape(), b.value.shape(), "{}", a.name),
        }
        if !a.name.starts_with("vtn.") {
            assert_eq!(a.value, b.value, "{} must not depend on the warp", a.name);
        }
    }
}

/// Task, consistency and total loss of one fixed batch plus the gradient of
/// each with respect to every trainable parameter.
struct Pass {
    task: f64,
    cons: f64,
    total: f64,
    grads: [Vec<Vec<f64>>; 3],
}

fn pass(model: &mut Model<f64>, x: &Tensor<f64>, labels: &[usize], lambda: f64) -> Pass {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = model.forward(&mut tape, xv, Mode::Eval).unwrap();
    let task = cross_entropy(&mut tape, out.logits, labels).unwrap();
    let a = tape.select(out.warped, &[0, 1]).unwrap();
    let p = tape.select(out.warped, &[1, 0]).unwrap();
    let n = tape.select(out.warped, &[2, 3]).unwrap();
    let cons = consistency_triplet_loss(&mut tape, a, p, n, 1.0).unwrap();
    let total = total_loss(&mut tape, task, cons, lambda).unwrap();
    let mut grads: [Vec<Vec<f64>>; 3] = Default::default();
    for (slot, root) in grads.iter_mut().zip([task, cons, total]) {
        let g = tape.backward(root).unwrap();
        model.store.zero_grads();
        model.store.accumulate(&g, &out.bindings);
        *slot = model.store.iter().filter(|p| p.trainable).map(|p| p.grad.data().to_vec()).collect();
    }
    let value = |v| tape.value(v).item().unwrap();
    Pass {
        task: value(task),
        cons: value(cons),
        total: value(total),
        grads,
    }
}

#[test]
fn total_gradient_is_task_plus_weighted_consistency() {
    let cfg = VtnConfig::new(8);
    let mut model = build_model::<f64>(&ModelSpec::new(Variant::Vtn, 10, 9), Some(&cfg)).unwrap();
    let x = images(4, 2);
    let labels = [3, 3, 5, 7];
    let lambda = 0.7;
    let p = pass(&mut model, &x, &labels, lambda);
    assert!((p.total - (p.task + lambda * p.cons)).abs() < 1e-12);
    let [gt, gc, gs] = &p.grads;
    for ((t, c), s) in gt.iter().zip(gc).zip(gs) {
        for ((a, b), s) in t.iter().zip(c).zip(s) {
            assert!((s - (a + lambda * b)).abs() <= 1e-10 * (1.0 + s.abs()));
        }
    }
    // finite differences on a few coordinates of the total
    let trainable: Vec<String> = model.store.iter().filter(|q| q.trainable).map(|q| q.name.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let eps = 1e-6;
    for _ in 0..12 {
        let pi = rng.gen_range(0..trainable.len());
        let id = model.store.find(&trainable[pi]).unwrap();
        let ci = rng.gen_range(0..model.store.get(id).value.len());
        let orig = model.store.get(id).value.data()[ci];
        model.store.get_mut(id).value.data_mut()[ci] = orig + eps;
        let up = pass(&mut model, &x, &labels, lambda).total;
        model.store.get_mut(id).value.data_mut()[ci] = orig - eps;
        let down = pass(&mut model, &x, &labels, lambda).total;
        model.store.get_mut(id).value.data_mut()[ci] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let analytic = gs[pi][ci];
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-3);
        assert!(rel < 1e-4, "{}[{ci}]: {analytic} vs {numeric}", trainable[pi]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn hinge_is_bounded(
        (shape, a, p, n, alpha) in (1usize..3, 1usize..4, 1usize..4, 1usize..4).prop_flat_map(|(b, h, w, k)| {
            let len = b * h * w * k;
            (
                Just(vec![b, h, w, k]),
                prop::collection::vec(-2.0f64..2.0, len),
                prop::collection::vec(-2.0f64..2.0, len),
                prop::collection::vec(-2.0f64..2.0, len),
                0.01f64..3.0,
            )
        })
    ) {
        let k = shape[3];
        let mut tape = Tape::new();
        let [va, vp, vn] = [&a, &p, &n].map(|d| tape.constant(Tensor::new(&shape, d.clone()).unwrap()));
        let l = consistency_triplet_loss(&mut tape, va, vp, vn, alpha).unwrap();
        let l = tape.value(l).item().unwrap();
        let upper: f64 = a.chunks(k).zip(p.chunks(k))
            .map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum::<f64>() + alpha)
            .sum();
        prop_assert!(l >= 0.0);
        prop_assert!(l <= upper + 1e-12);
    }
}
