//! Central finite-difference checks of every differentiable op, in f64.
//!
//! Each case reduces the op output to a scalar through a fixed random
//! weighting, then compares the tape gradient of every input coordinate
//! against `(f(x+ε) − f(x−ε)) / 2ε`. Inputs are drawn away from the kinks of
//! max, relu, hinge and the sampler's integer grid.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // only needed when no dependency links std
#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::loss;
use crate::nn::{Ctx, Mode};
use crate::param::{ParamId, ParamStore};
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;
use crate::vtn::ops::candidate_count;
use crate::vtn::{channel_expand, channel_squeeze, vtn_forward, VtnConfig, VtnParams};

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOptions {
    /// Random cases per primitive op.
    pub cases: usize,
    /// Random cases for the composed warp pipeline.
    pub pipeline_cases: usize,
    /// Random cases for the full layer.
    pub layer_cases: usize,
    pub seed: u64,
    pub eps: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Coordinates checked per input tensor; larger tensors are subsampled.
    pub max_coords: usize,
    /// Corrupts the backward pass of one op kind, to prove the checker bites.
    pub fault: Option<OpKind>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            cases: 100,
            pipeline_cases: 100,
            layer_cases: 10,
            seed: 0x6772_6164,
            eps: 1e-6,
            tolerance: 1e-4,
            floor: 1e-3,
            max_coords: 24,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub cases: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn worst(&self) -> f64 {
        self.results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.results.iter().find(|r| r.name == name)
    }
}

/// Loss value and, when asked, the gradient of every input.
type Eval = Box<dyn Fn(&[Tensor<f64>], Option<OpKind>, bool) -> Result<(f64, Vec<Tensor<f64>>)>>;

struct Case {
    inputs: Vec<Tensor<f64>>,
    eval: Eval,
}

type OpFn = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Entries pairwise at least `gap` apart, in random order.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * gap + rng.gen_range(0.0..gap * 0.2)).collect();
    vals.shuffle(rng);
    Tensor::new(shape, vals).expect("shape")
}

/// Uniform values with magnitude at least `min_abs`.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize], min_abs: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(min_abs..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Wraps a tape op as a case: `loss = Σ op(x) ⊙ w` with fixed random `w`.
fn op_case(rng: &mut ChaCha8Rng, inputs: Vec<Tensor<f64>>, f: Box<OpFn>) -> Result<Case> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let weights = uniform(rng, tape.shape(out), -1.0, 1.0);
    let eval: Eval = Box::new(move |xs, fault, want| {
        let mut tape = Tape::new();
        if let Some(k) = fault {
            tape.inject_fault(k);
        }
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w)?;
        let loss = tape.sum(prod);
        let value = tape.value(loss).item()?;
        let grads = if want {
            let g = tape.backward(loss)?;
            vars.iter().zip(xs).map(|(&v, t)| g.get_or_zeros(v, t.shape())).collect()
        } else {
            Vec::new()
        };
        Ok((value, grads))
    });
    Ok(Case { inputs, eval })
}

fn worst_error(case: &Case, opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<f64> {
    let (_, analytic) = (case.eval)(&case.inputs, opts.fault, true)?;
    let mut xs = case.inputs.clone();
    let mut worst = 0.0f64;
    for i in 0..xs.len() {
        let mut coords: Vec<usize> = (0..xs[i].len()).collect();
        if coords.len() > opts.max_coords {
            coords.shuffle(rng);
            coords.truncate(opts.max_coords);
        }
        for c in coords {
            let orig = xs[i].data()[c];
            xs[i].data_mut()[c] = orig + opts.eps;
            let (fp, _) = (case.eval)(&xs, None, false)?;
            xs[i].data_mut()[c] = orig - opts.eps;
            let (fm, _) = (case.eval)(&xs, None, false)?;
            xs[i].data_mut()[c] = orig;
            let numeric = (fp - fm) / (2.0 * opts.eps);
            let a = analytic[i].data()[c];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

type Gen = fn(&mut ChaCha8Rng) -> Result<Case>;

fn gen_matmul(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (m, k, n) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
    let ins = vec![uniform(rng, &[m, k], -1.0, 1.0), uniform(rng, &[k, n], -1.0, 1.0)];
    op_case(rng, ins, Box::new(|t, v| t.matmul(v[0], v[1])))
}

fn gen_conv(rng: &mut ChaCha8Rng) -> Result<Case> {
    loop {
        let k = [1usize, 3][rng.gen_range(0..2)];
        let pad = rng.gen_range(0..=k / 2);
        let stride = rng.gen_range(1..3);
        let h = rng.gen_range(k..6);
        let w = rng.gen_range(k..6);
        if (h + 2 * pad - k) % stride != 0 || (w + 2 * pad - k) % stride != 0 {
            continue;
        }
        let (b, cin, cout) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
        let ins = vec![
            uniform(rng, &[b, h, w, cin], -1.0, 1.0),
            uniform(rng, &[k, k, cin, cout], -1.0, 1.0),
            uniform(rng, &[cout], -1.0, 1.0),
        ];
        return op_case(rng, ins, Box::new(move |t, v| t.conv2d(v[0], v[1], v[2], stride, pad)));
    }
}

fn gen_maxpool(rng: &mut ChaCha8Rng) -> Result<Case> {
    let s = [rng.gen_range(1..3), 2 * rng.gen_range(1..3), 2 * rng.gen_range(1..3), rng.gen_range(1..4)];
    let ins = vec![distinct(rng, &s, 0.05)];
    op_case(rng, ins, Box::new(|t, v| t.maxpool2(v[0])))
}

fn gen_upsample(rng: &mut ChaCha8Rng) -> Result<Case> {
    let s = [rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4)];
    let ins = vec![uniform(rng, &s, -1.0, 1.0)];
    op_case(rng, ins, Box::new(|t, v| t.upsample2(v[0])))
}

fn gen_spatial_mean(rng: &mut ChaCha8Rng) -> Result<Case> {
    let s = [rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4)];
    let ins = vec![uniform(rng, &s, -1.0, 1.0)];
    op_case(rng, ins, Box::new(|t, v| t.spatial_mean(v[0])))
}

fn gen_batch_norm(rng: &mut ChaCha8Rng) -> Result<Case> {
    let c = rng.gen_range(1..4);
    let s = [rng.gen_range(2..4), rng.gen_range(1..3), rng.gen_range(1..3), c];
    let ins = vec![
        uniform(rng, &s, -1.0, 1.0),
        uniform(rng, &[c], 0.5, 1.5),
        uniform(rng, &[c], -0.5, 0.5),
    ];
    op_case(rng, ins, Box::new(|t, v| Ok(t.batch_norm(v[0], v[1], v[2], 1e-5)?.0)))
}

fn gen_batch_norm_eval(rng: &mut ChaCha8Rng) -> Result<Case> {
    let c = rng.gen_range(1..4);
    let s = [rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(1..3), c];
    let mean: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let var: Vec<f64> = (0..c).map(|_| rng.gen_range(0.2..2.0)).collect();
    let ins = vec![
        uniform(rng, &s, -1.0, 1.0),
        uniform(rng, &[c], 0.5, 1.5),
        uniform(rng, &[c], -0.5, 0.5),
    ];
    op_case(rng, ins, Box::new(move |t, v| t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)))
}

fn gen_group_norm(rng: &mut ChaCha8Rng) -> Result<Case> {
    let groups = rng.gen_range(1..4);
    let s = [rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(1..3), groups * rng.gen_range(1..3)];
    let ins = vec![uniform(rng, &s, -1.0, 1.0)];
    op_case(rng, ins, Box::new(move |t, v| t.group_norm(v[0], groups, 1e-5)))
}

fn gen_softmax(rng: &mut ChaCha8Rng) -> Result<Case> {
    let s = [rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..4)];
    let axis = rng.gen_range(0..3);
    let beta = rng.gen_range(0.3..3.0);
    let ins = vec![uniform(rng, &s, -2.0, 2.0)];
    op_case(rng, ins, Box::new(move |t, v| t.softmax(v[0], axis, beta)))
}

fn gen_elementwise(rng: &mut ChaCha8Rng) -> Result<Case> {
    let s = [rng.gen_range(1..4), rng.gen_range(1..4)];
    let ins = vec![uniform(rng, &s, -1.0, 1.0), off_zero(rng, &s, 0.05), uniform(rng, &s, -1.0, 1.0)];
    let k = rng.gen_range(-2.0..2.0);
    op_case(
        rng,
        ins,
        Box::new(move |t, v| {
            let a = t.add(v[0], v[2])?;
            let r = t.relu(v[1]);
            let m = t.mul(a, r)?;
            let th = t.tanh(v[0]);
            let d = t.sub(m, th)?;
            Ok(t.scale(d, k))
        }),
    )
}

fn gen_shape_ops(rng: &mut ChaCha8Rng) -> Result<Case> {
    let s = [rng.gen_range(2..5), rng.gen_range(1..4), rng.gen_range(1..4)];
    let rows: Vec<usize> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..s[0])).collect();
    let ins = vec![uniform(rng, &s, -1.0, 1.0), uniform(rng, &[s[1]], -1.0, 1.0)];
    op_case(
        rng,
        ins,
        Box::new(move |t, v| {
            let x = t.select(v[0], &rows)?;
            let p = t.permute(x, &[0, 2, 1])?;
            let sh = t.shape(p).to_vec();
            let r = t.reshape(p, &[sh[0] * sh[1], sh[2]])?;
            let y = t.add_bias(r, v[1])?;
            let m = t.mean(y);
            let yy = t.mul(y, y)?;
            let s = t.sum(yy);
            t.add(m, s)
        }),
    )
}

/// Field whose sample positions stay at least 0.05 away from every integer,
/// so the bilinear weights are smooth in a neighbourhood of the input.
fn smooth_field(rng: &mut ChaCha8Rng, b: usize, c: usize, h: usize, w: usize) -> Tensor<f64> {
    let mut data = Vec::with_capacity(b * c * h * w * 2);
    for _ in 0..b * c {
        for row in 0..h {
            for col in 0..w {
                for (pos, extent) in [(row, h), (col, w)] {
                    let target = loop {
                        let p: f64 = rng.gen_range(-1.5..extent as f64 + 0.5);
                        let frac = p - p.floor();
                        if frac > 0.05 && frac < 0.95 {
                            break p;
                        }
                    };
                    data.push(target - pos as f64);
                }
            }
        }
    }
    Tensor::new(&[b, c, h, w, 2], data).expect("shape")
}

fn warp_dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize, usize) {
    let c = rng.gen_range(1..4);
    (rng.gen_range(1..3), rng.gen_range(1..5), rng.gen_range(1..5), c, c * rng.gen_range(1..3))
}

fn gen_sample_u(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (b, h, w, c, k) = warp_dims(rng);
    let field = smooth_field(rng, b, c, h, w);
    let ins = vec![uniform(rng, &[b, h, w, k], -1.0, 1.0)];
    op_case(
        rng,
        ins,
        Box::new(move |t, v| {
            let g = t.constant(field.clone());
            t.warp_sample(v[0], g)
        }),
    )
}

fn gen_sample_field(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (b, h, w, c, k) = warp_dims(rng);
    let u = uniform(rng, &[b, h, w, k], -1.0, 1.0);
    let ins = vec![smooth_field(rng, b, c, h, w)];
    op_case(
        rng,
        ins,
        Box::new(move |t, v| {
            let x = t.constant(u.clone());
            t.warp_sample(x, v[0])
        }),
    )
}

fn gen_squeeze(rng: &mut ChaCha8Rng) -> Result<Case> {
    let kin = rng.gen_range(2..6);
    let kout = rng.gen_range(1..kin);
    let s = [rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(1..3), kin];
    let ins = vec![uniform(rng, &s, -1.0, 1.0), uniform(rng, &[kin, kout], -1.0, 1.0)];
    op_case(rng, ins, Box::new(|t, v| channel_squeeze(t, v[0], v[1])))
}

fn gen_expand(rng: &mut ChaCha8Rng) -> Result<Case> {
    let kin = rng.gen_range(1..4);
    let kout = rng.gen_range(kin..6);
    let s = [rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(1..3), kin];
    let ins = vec![uniform(rng, &s, -1.0, 1.0), uniform(rng, &[kin, kout], -1.0, 1.0)];
    op_case(rng, ins, Box::new(|t, v| channel_expand(t, v[0], v[1])))
}

fn gen_group_pool(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (b, h, w, c, k) = warp_dims(rng);
    let ins = vec![distinct(rng, &[b, h, w, k], 0.05)];
    op_case(rng, ins, Box::new(move |t, v| t.group_pool(v[0], c)))
}

fn gen_candidate_probs(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (b, h, w, c, _) = warp_dims(rng);
    let r = rng.gen_range(0..3);
    let n = candidate_count(r);
    let beta = rng.gen_range(0.5..4.0);
    let ins = vec![uniform(rng, &[b, c, h, w, n], -2.0, 2.0), uniform(rng, &[b, h, w, c, 2], -1.0, 1.0)];
    op_case(rng, ins, Box::new(move |t, v| t.candidate_probs(v[0], v[1], r, beta)))
}

fn gen_aggregate(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (b, h, w, c, _) = warp_dims(rng);
    let r = rng.gen_range(0..3);
    let n = candidate_count(r);
    // rows must be distributions, otherwise the field leaves [-r, r]
    let mut p = uniform(rng, &[b, c, h, w, n], 0.05, 1.0);
    for row in p.data_mut().chunks_mut(n) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    op_case(rng, vec![p], Box::new(move |t, v| t.aggregate_field(v[0], r)))
}

fn gen_cross_entropy(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (b, k) = (rng.gen_range(1..5), rng.gen_range(2..6));
    let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..k)).collect();
    let ins = vec![uniform(rng, &[b, k], -3.0, 3.0)];
    op_case(rng, ins, Box::new(move |t, v| loss::cross_entropy(t, v[0], &labels)))
}

fn gen_triplet(rng: &mut ChaCha8Rng) -> Result<Case> {
    loop {
        let s = [rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(1..4)];
        let alpha = rng.gen_range(0.2..1.5);
        let (a, p, n) = (
            uniform(rng, &s, -1.0, 1.0),
            uniform(rng, &s, -1.0, 1.0),
            uniform(rng, &s, -1.0, 1.0),
        );
        let ch = s[3];
        let margin_ok = a.data().chunks(ch).zip(p.data().chunks(ch)).zip(n.data().chunks(ch)).all(|((x, y), z)| {
            let dp: f64 = x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum();
            let dn: f64 = x.iter().zip(z).map(|(u, v)| (u - v) * (u - v)).sum();
            (dp - dn + alpha).abs() > 0.02
        });
        if margin_ok {
            return op_case(
                rng,
                vec![a, p, n],
                Box::new(move |t, v| loss::consistency_triplet_loss(t, v[0], v[1], v[2], alpha)),
            );
        }
    }
}

/// Group pooling, candidate probabilities, expected offsets and the warp,
/// differentiated with respect to the features and the head logits.
fn gen_pipeline(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (b, h, w, c, k) = warp_dims(rng);
    let r = rng.gen_range(1..3);
    let beta = [1.0, 3.0, 10.0][rng.gen_range(0..3)];
    let ins = vec![
        distinct(rng, &[b, h, w, k], 0.1),
        uniform(rng, &[b, c, h, w, candidate_count(r)], -2.0, 2.0),
    ];
    op_case(
        rng,
        ins,
        Box::new(move |t, v| {
            let pooled = t.group_pool(v[0], c)?;
            let p = t.candidate_probs(v[1], pooled, r, beta)?;
            let g = t.aggregate_field(p, r)?;
            t.warp_sample(v[0], g)
        }),
    )
}

/// The whole layer on `[2,8,8,8]` features with two groups, radius 1 and a
/// randomised head, checked against the input and every trainable parameter.
fn gen_layer(rng: &mut ChaCha8Rng) -> Result<Case> {
    let cfg = VtnConfig {
        radius: 1,
        ..VtnConfig::new(2)
    };
    let mut store = ParamStore::<f64>::new();
    let params = VtnParams::new(&mut store, "vtn", &cfg, rng);
    for id in [params.head().weight(), params.head().bias()] {
        let shape = store.get(id).value.shape().to_vec();
        store.get_mut(id).value = uniform(rng, &shape, -0.3, 0.3);
    }
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|p| p.trainable)
        .map(|p| store.find(&p.name).expect("own name"))
        .collect();
    let u = distinct(rng, &[2, 8, 8, 8], 0.003);
    let weights = uniform(rng, &[2, 8, 8, 8], -1.0, 1.0);
    let mut inputs = vec![u];
    inputs.extend(ids.iter().map(|&id| store.get(id).value.clone()));
    let eval: Eval = Box::new(move |xs, fault, want| {
        let mut s = store.clone();
        for (&id, t) in ids.iter().zip(&xs[1..]) {
            s.get_mut(id).value = t.clone();
        }
        let mut tape = Tape::new();
        if let Some(k) = fault {
            tape.inject_fault(k);
        }
        let u = tape.leaf(xs[0].clone(), true);
        let mut ctx = Ctx::new(&mut tape, Mode::Train);
        let out = vtn_forward(&mut ctx, &s, &params, u)?;
        let bindings = ctx.finish(&mut s);
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out.warped, w)?;
        let loss = tape.sum(prod);
        let value = tape.value(loss).item()?;
        if !want {
            return Ok((value, Vec::new()));
        }
        let g = tape.backward(loss)?;
        s.zero_grads();
        s.accumulate(&g, &bindings);
        let mut grads = vec![g.get_or_zeros(u, xs[0].shape())];
        grads.extend(ids.iter().map(|&id| s.get(id).grad.clone()));
        Ok((value, grads))
    });
    Ok(Case { inputs, eval })
}

fn primitives() -> [(&'static str, Gen); 21] {
    [
        ("matmul", gen_matmul),
        ("conv2d", gen_conv),
        ("maxpool2", gen_maxpool),
        ("upsample2", gen_upsample),
        ("spatial_mean", gen_spatial_mean),
        ("batch_norm", gen_batch_norm),
        ("batch_norm_eval", gen_batch_norm_eval),
        ("group_norm", gen_group_norm),
        ("softmax", gen_softmax),
        ("elementwise", gen_elementwise),
        ("shape_ops", gen_shape_ops),
        ("bilinear_sample_u", gen_sample_u),
        ("bilinear_sample_field", gen_sample_field),
        ("channel_squeeze", gen_squeeze),
        ("channel_expand", gen_expand),
        ("group_pool", gen_group_pool),
        ("candidate_probs", gen_candidate_probs),
        ("aggregate_field", gen_aggregate),
        ("cross_entropy", gen_cross_entropy),
        ("triplet_hinge", gen_triplet),
        ("warp_pipeline", gen_pipeline),
    ]
}

/// Names of every check, in report order.
pub fn check_names() -> Vec<&'static str> {
    let mut v: Vec<_> = primitives().iter().map(|(n, _)| *n).collect();
    v.push("vtn_layer");
    v
}

/// Runs one named check.
pub fn run_check(name: &str, opts: &GradcheckOptions) -> Result<Option<CheckResult>> {
    let (name, gen, cases): (&'static str, Gen, usize) = if name == "vtn_layer" {
        ("vtn_layer", gen_layer, opts.layer_cases)
    } else {
        match primitives().into_iter().find(|(n, _)| *n == name) {
            Some(("warp_pipeline", g)) => ("warp_pipeline", g, opts.pipeline_cases),
            Some((n, g)) => (n, g, opts.cases),
            None => return Ok(None),
        }
    };
    let seed = name.bytes().fold(opts.seed, |h, b| h.wrapping_mul(0x100_0000_01b3) ^ b as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let case = gen(&mut rng)?;
        worst = worst.max(worst_error(&case, opts, &mut rng)?);
    }
    Ok(Some(CheckResult {
        name,
        cases,
        max_rel_err: worst,
        passed: worst < opts.tolerance,
    }))
}

pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut results = Vec::new();
    for name in check_names() {
        results.extend(run_check(name, opts)?);
    }
    Ok(GradcheckReport {
        tolerance: opts.tolerance,
        results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> GradcheckOptions {
        GradcheckOptions {
            cases: 5,
            pipeline_cases: 2,
            layer_cases: 1,
            ..GradcheckOptions::default()
        }
    }

    #[test]
    fn unknown_check_is_none() {
        assert!(run_check("nope", &quick()).unwrap().is_none());
    }

    #[test]
    fn conv_fault_is_caught() {
        let opts = GradcheckOptions {
            fault: Some(OpKind::Conv2d),
            ..quick()
        };
        let r = run_check("conv2d", &opts).unwrap().unwrap();
        assert!(!r.passed, "{r:?}");
        assert!(r.max_rel_err > 0.1);
        let clean = run_check("conv2d", &quick()).unwrap().unwrap();
        assert!(clean.passed, "{clean:?}");
    }

    #[test]
    fn sampler_fault_is_caught() {
        let opts = GradcheckOptions {
            fault: Some(OpKind::WarpSample),
            ..quick()
        };
        assert!(!run_check("bilinear_sample_field", &opts).unwrap().unwrap().passed);
    }
}
