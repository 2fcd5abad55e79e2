//! Brute-force reference implementations checked against the kernels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;

use vtn_core::kernels::conv::{conv2d, ConvGeom};
use vtn_core::nn::{Ctx, Mode};
use vtn_core::param::ParamStore;
use vtn_core::synth::{make_dataset, sample_poses, ClassSpec, PartShape, PartSpec, SceneSpec};
use vtn_core::tape::Tape;
use vtn_core::vtn::ops::{candidate_count, group_pool};
use vtn_core::vtn::{aggregate_warp_field, vtn_forward, VtnConfig, VtnParams, GROUP_NORM_EPS};
use vtn_core::Tensor;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn conv_matches_six_loop_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let k = [1usize, 3, 5][rng.gen_range(0..3)];
        let pad = rng.gen_range(0..=k / 2);
        let (h, w) = (rng.gen_range(k..8), rng.gen_range(k..8));
        let (cin, cout, b) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..3));
        let g = ConvGeom::new(&[b, h, w, cin], &[k, k, cin, cout], 1, pad).unwrap();
        let x = rand_vec(&mut rng, b * h * w * cin);
        let wt = rand_vec(&mut rng, k * k * cin * cout);
        let bias = rand_vec(&mut rng, cout);
        let got = conv2d(&g, &x, &wt, &bias);
        let [_, oh, ow, _] = g.out_shape();
        for n in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    for co in 0..cout {
                        let mut acc = bias[co];
                        for ky in 0..k {
                            for kx in 0..k {
                                for ci in 0..cin {
                                    let (iy, ix) = ((oy + ky) as isize - pad as isize, (ox + kx) as isize - pad as isize);
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xi = ((n * h + iy as usize) * w + ix as usize) * cin + ci;
                                    acc += x[xi] * wt[((ky * k + kx) * cin + ci) * cout + co];
                                }
                            }
                        }
                        let got = got[((n * oh + oy) * ow + ox) * cout + co];
                        assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                    }
                }
            }
        }
    }
}

/// Direct evaluation of the probabilities and expected offsets for one
/// `[H,W,K]` map: returns `P[c][y][x][n]` and `G[c][y][x] = (gy, gx)`.
struct Reference {
    p: Vec<f64>,
    g: Vec<(f64, f64)>,
}

fn reference_probs(u: &[f64], e: &[f64], h: usize, w: usize, k: usize, c: usize, r: usize, beta: f64) -> Reference {
    let gs = k / c;
    let n = candidate_count(r);
    let resp = |grp: usize, y: usize, x: usize| {
        let px = &u[(y * w + x) * k + grp * gs..(y * w + x) * k + (grp + 1) * gs];
        let mx = px.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let avg = px.iter().sum::<f64>() / gs as f64;
        mx + avg
    };
    let mut p = vec![0.0; c * h * w * n];
    let mut g = vec![(0.0, 0.0); c * h * w];
    for grp in 0..c {
        for y in 0..h {
            for x in 0..w {
                let base = ((grp * h + y) * w + x) * n;
                let mut logits = Vec::new();
                for dy in -(r as isize)..=r as isize {
                    for dx in -(r as isize)..=r as isize {
                        let (yy, xx) = (y as isize + dy, x as isize + dx);
                        let t = ((dy + r as isize) * (2 * r as isize + 1) + dx + r as isize) as usize;
                        if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                            logits.push((t, dy, dx, (resp(grp, yy as usize, xx as usize) + e[base + t]) / beta));
                        }
                    }
                }
                let z: f64 = logits.iter().map(|l| l.3.exp()).sum();
                let (mut gy, mut gx) = (0.0, 0.0);
                for &(t, dy, dx, l) in &logits {
                    let pr = l.exp() / z;
                    p[base + t] = pr;
                    gy += pr * dy as f64;
                    gx += pr * dx as f64;
                }
                g[(grp * h + y) * w + x] = (gy, gx);
            }
        }
    }
    Reference { p, g }
}

#[test]
fn probabilities_and_field_match_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (h, w) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let c = rng.gen_range(1..=4);
        let k = c * rng.gen_range(1..=3);
        let r = rng.gen_range(0..=2);
        let beta = rng.gen_range(0.5..20.0);
        let n = candidate_count(r);
        let u = rand_vec(&mut rng, h * w * k);
        let e: Vec<f64> = rand_vec(&mut rng, c * h * w * n).iter().map(|v| 3.0 * v).collect();
        let want = reference_probs(&u, &e, h, w, k, c, r, beta);

        let mut tape = Tape::<f64>::new();
        let uv = tape.constant(Tensor::new(&[1, h, w, k], u.clone()).unwrap());
        let pooled = tape.group_pool(uv, c).unwrap();
        let ev = tape.constant(Tensor::new(&[1, c, h, w, n], e.clone()).unwrap());
        let p = tape.candidate_probs(ev, pooled, r, beta).unwrap();
        let probs = tape.value(p).clone();
        for (a, b) in probs.data().iter().zip(&want.p) {
            worst = worst.max((a - b).abs());
        }
        let cfg = VtnConfig {
            radius: r,
            beta,
            ..VtnConfig::new(c)
        };
        let fields = aggregate_warp_field(&probs.reshape(&[c, h, w, n]).unwrap(), &cfg).unwrap();
        for (grp, f) in fields.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    let (gy, gx) = f.at(y, x);
                    let (ry, rx) = want.g[(grp * h + y) * w + x];
                    worst = worst.max((gy - ry).abs()).max((gx - rx).abs());
                }
            }
        }
    }
    assert!(worst < 1e-12, "max deviation {worst:e}");
}

fn reference_bilinear(u: &[f64], h: usize, w: usize, k: usize, ch: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |yy: usize, xx: usize| u[(yy * w + xx) * k + ch];
    (1.0 - fy) * (1.0 - fx) * at(y0, x0) + (1.0 - fy) * fx * at(y0, x1) + fy * (1.0 - fx) * at(y1, x0) + fy * fx * at(y1, x1)
}

#[test]
fn layer_forward_matches_chained_stage_references() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..10 {
        let (h, w, c) = (8, 8, 2);
        let k = c * 2;
        let cfg = VtnConfig {
            radius: 1 + trial % 2,
            beta: 2.0,
            ..VtnConfig::new(c)
        };
        let mut store = ParamStore::<f64>::new();
        let params = VtnParams::new(&mut store, "vtn", &cfg, &mut rng);
        for id in [params.head().weight(), params.head().bias()] {
            let len = store.get(id).value.len();
            let shape = store.get(id).value.shape().to_vec();
            store.get_mut(id).value = Tensor::new(&shape, rand_vec(&mut rng, len)).unwrap();
        }
        let u = rand_vec(&mut rng, h * w * k);
        let mut tape = Tape::new();
        let uv = tape.constant(Tensor::new(&[1, h, w, k], u.clone()).unwrap());
        let mut ctx = Ctx::new(&mut tape, Mode::Eval);
        let out = vtn_forward(&mut ctx, &store, &params, uv).unwrap();

        // stage 1: grouped max/mean, then per-group standardisation over H·W·2
        let gs = k / c;
        let grouped = tape.value(out.grouped).data().to_vec();
        for grp in 0..c {
            let mut vals = Vec::new();
            for px in 0..h * w {
                let s = &u[px * k + grp * gs..px * k + (grp + 1) * gs];
                vals.push(s.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
                vals.push(s.iter().sum::<f64>() / gs as f64);
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            for px in 0..h * w {
                for slot in 0..2 {
                    let want = (vals[px * 2 + slot] - mean) / (var + GROUP_NORM_EPS).sqrt();
                    let got = grouped[(px * c + grp) * 2 + slot];
                    assert!((got - want).abs() < 1e-10, "stage 1: {got} vs {want}");
                }
            }
        }
        // stages 3-4 on top of the module's own estimator output
        let e = tape.value(out.logits).data().to_vec();
        let want = reference_probs(&u, &e, h, w, k, c, cfg.radius, cfg.beta);
        let field = tape.value(out.field).data().to_vec();
        for (i, &(gy, gx)) in want.g.iter().enumerate() {
            assert!((field[2 * i] - gy).abs() < 1e-10 && (field[2 * i + 1] - gx).abs() < 1e-10);
        }
        // warp
        let v = tape.value(out.warped).data();
        for y in 0..h {
            for x in 0..w {
                for ch in 0..k {
                    let (gy, gx) = want.g[((ch / gs) * h + y) * w + x];
                    let want = reference_bilinear(&u, h, w, k, ch, y as f64 + gy, x as f64 + gx);
                    assert!((v[(y * w + x) * k + ch] - want).abs() < 1e-10);
                }
            }
        }
    }
}

#[test]
fn group_pool_reports_max_and_mean() {
    let u: [f64; 6] = [1.0, 5.0, -2.0, 0.5, 0.5, 0.5];
    let (pooled, arg) = group_pool(&u, 3, 1);
    assert_eq!(pooled[0], 5.0);
    assert!((pooled[1] - 4.0 / 3.0).abs() < 1e-15);
    assert_eq!(arg[0], 1);
    assert_eq!(&pooled[2..], &[0.5, 0.5]);
}

fn intensity_centroid(img: &[f32], w: usize, rows: std::ops::Range<usize>) -> (f64, f64) {
    let (mut m, mut sy, mut sx) = (0.0, 0.0, 0.0);
    for y in rows {
        for x in 0..w {
            let v = img[y * w + x] as f64;
            m += v;
            sy += v * y as f64;
            sx += v * x as f64;
        }
    }
    (sy / m, sx / m)
}

#[test]
fn translated_part_centroid_stays_within_range() {
    let disk = |t: f64| SceneSpec {
        height: 32,
        width: 32,
        classes: vec![
            ClassSpec {
                parts: vec![PartSpec {
                    shape: PartShape::Disk,
                    center: (15.5, 15.5),
                    radius: 4.0,
                    intensity: 1.0,
                }],
            },
            ClassSpec {
                parts: vec![PartSpec {
                    shape: PartShape::Ring,
                    center: (15.5, 15.5),
                    radius: 4.0,
                    intensity: 1.0,
                }],
            },
        ],
        translation: t,
        rotation: 0.0,
        scale: (1.0, 1.0),
        jitter: 0.0,
        noise: 0.0,
    };
    let template = vtn_core::synth::render_instance(&disk(0.0), 0, 0).unwrap();
    let (cy, cx) = intensity_centroid(&template, 32, 0..32);
    let moved = disk(3.0);
    for seed in 0..200 {
        let img = vtn_core::synth::render_instance(&moved, 0, seed).unwrap();
        let (y, x) = intensity_centroid(&img, 32, 0..32);
        let pose = sample_poses(&moved, 0, seed).unwrap()[0];
        assert!((y - cy).abs() <= 3.0 + 1e-6 && (x - cx).abs() <= 3.0 + 1e-6);
        // the centroid follows the sampled pose
        assert!((y - pose.center.0).abs() < 0.05 && (x - pose.center.1).abs() < 0.05, "{y},{x} vs {pose:?}");
    }
}

#[test]
fn train_and_test_images_are_distinct() {
    let d = make_dataset(&SceneSpec::desk_default(), 300, 100, 3).unwrap();
    let key = |img: &[f32]| img.iter().map(|v| v.to_bits()).collect::<Vec<u32>>();
    let train: HashSet<_> = (0..d.train.len()).map(|i| key(d.train.image(i))).collect();
    assert_eq!(train.len(), 300);
    assert!((0..d.test.len()).all(|i| !train.contains(&key(d.test.image(i)))));
}
