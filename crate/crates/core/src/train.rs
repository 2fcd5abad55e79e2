//! Triplet mining, SGD with momentum and the epoch loop.

use alloc::vec::Vec;

#[allow(unused_imports)] // only needed when no dependency links std
#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::loss;
use crate::model::Model;
use crate::nn::Mode;
use crate::param::ParamStore;
use crate::synth::Split;
use crate::tape::Tape;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TripletIndex {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// One triplet per sample that has a same-class partner, with uniformly
/// drawn positive and negative. Empty when no sample has a partner or no
/// negative exists.
pub fn mine_triplets<G: Rng>(labels: &[usize], rng: &mut G) -> Vec<TripletIndex> {
    let mut out = Vec::new();
    for (anchor, &la) in labels.iter().enumerate() {
        let positives: Vec<usize> = (0..labels.len()).filter(|&j| j != anchor && labels[j] == la).collect();
        let negatives: Vec<usize> = (0..labels.len()).filter(|&j| labels[j] != la).collect();
        if positives.is_empty() || negatives.is_empty() {
            continue;
        }
        out.push(TripletIndex {
            anchor,
            positive: positives[rng.gen_range(0..positives.len())],
            negative: negatives[rng.gen_range(0..negatives.len())],
        });
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fraction of the epochs after which the learning rate drops ×0.1.
    pub decay_at: f64,
    /// Consistency weight `λ`.
    pub lambda: f64,
    /// Triplet margin `α`.
    pub alpha: f64,
    /// Random horizontal flips.
    pub flip: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 12,
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            decay_at: 2.0 / 3.0,
            lambda: 1.0,
            alpha: 1.0,
            flip: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("need lr >= 0, 0 <= momentum < 1, weight_decay >= 0"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::config("lambda must be >= 0"));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::config("alpha must be > 0"));
        }
        Ok(())
    }

    /// Learning rate in effect for `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let cut = (self.epochs as f64 * self.decay_at).floor() as usize;
        if self.epochs > 0 && epoch >= cut.max(1) {
            self.lr * 0.1
        } else {
            self.lr
        }
    }
}

/// SGD with momentum and L2 weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<R> {
    pub lr: R,
    pub momentum: R,
    pub weight_decay: R,
    pub step: u64,
    buffers: Vec<Tensor<R>>,
}

impl<R: Real> OptimState<R> {
    pub fn new(store: &ParamStore<R>, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        OptimState {
            lr: R::from_f64(lr),
            momentum: R::from_f64(momentum),
            weight_decay: R::from_f64(weight_decay),
            step: 0,
            buffers: store.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    /// `v ← μv + g + λw; w ← w − ηv` for every trainable parameter.
    pub fn apply(&mut self, store: &mut ParamStore<R>) {
        for (p, buf) in store.iter_mut().zip(&mut self.buffers) {
            if !p.trainable {
                continue;
            }
            debug_assert_eq!(buf.shape(), p.value.shape());
            let v = buf.data_mut();
            let g = p.grad.data();
            let w = p.value.data_mut();
            for i in 0..w.len() {
                v[i] = self.momentum * v[i] + g[i] + self.weight_decay * w[i];
                w[i] -= self.lr * v[i];
            }
        }
        self.step += 1;
    }
}

/// A minibatch: images `[B,H,W,1]` and their labels.
#[derive(Clone, Debug)]
pub struct Batch<R> {
    pub images: Tensor<R>,
    pub labels: Vec<usize>,
    /// Seed of the RNG that drew this batch's augmentation.
    pub seed: u64,
}

impl<R: Real> Batch<R> {
    /// Gathers `indices` from a split, flipping each image horizontally with
    /// probability ½ when `flip` is set.
    pub fn gather(split: &Split, indices: &[usize], flip: bool, seed: u64) -> Self {
        let (h, w) = (split.height, split.width);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(indices.len() * h * w);
        for &i in indices {
            let img = split.image(i);
            let mirrored = flip && rng.gen_bool(0.5);
            for row in img.chunks_exact(w) {
                if mirrored {
                    data.extend(row.iter().rev().map(|&v| R::from_f64(v as f64)));
                } else {
                    data.extend(row.iter().map(|&v| R::from_f64(v as f64)));
                }
            }
        }
        Batch {
            images: Tensor::new(&[indices.len(), h, w, 1], data).expect("split geometry"),
            labels: indices.iter().map(|&i| split.labels[i]).collect(),
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub task_loss: f64,
    pub cons_loss: f64,
    pub accuracy: f64,
    /// Steps whose batch held no valid triplet.
    pub skipped_cons: usize,
}

fn correct<R: Real>(logits: &Tensor<R>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            best == l
        })
        .count()
}

/// One pass over `data` in shuffled minibatches.
pub fn train_epoch<R: Real>(
    model: &mut Model<R>,
    data: &Split,
    optim: &mut OptimState<R>,
    cfg: &TrainConfig,
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EpochMetrics> {
    if data.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let lambda = R::from_f64(cfg.lambda);
    let alpha = R::from_f64(cfg.alpha);
    let (mut task_sum, mut cons_sum, mut hits) = (0.0, 0.0, 0usize);
    let (mut cons_steps, mut skipped) = (0usize, 0usize);
    for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
        let batch_seed = rng.next_u64();
        let batch = Batch::<R>::gather(data, idx, cfg.flip, batch_seed);
        let mut trip_rng = ChaCha8Rng::seed_from_u64(batch_seed ^ 0x5bd1_e995);
        let triplets = mine_triplets(&batch.labels, &mut trip_rng);

        let mut tape = Tape::new();
        let images = tape.constant(batch.images.clone());
        let out = model.forward(&mut tape, images, Mode::Train)?;
        let task = loss::cross_entropy(&mut tape, out.logits, &batch.labels)?;
        let total = if triplets.is_empty() {
            skipped += 1;
            task
        } else {
            let pick = |f: fn(&TripletIndex) -> usize| triplets.iter().map(f).collect::<Vec<_>>();
            let a = tape.select(out.warped, &pick(|t| t.anchor))?;
            let p = tape.select(out.warped, &pick(|t| t.positive))?;
            let n = tape.select(out.warped, &pick(|t| t.negative))?;
            let summed = loss::consistency_triplet_loss(&mut tape, a, p, n, alpha)?;
            let cons = tape.scale(summed, R::one() / R::from_usize(triplets.len()));
            cons_sum += tape.value(cons).item()?.as_f64();
            cons_steps += 1;
            loss::total_loss(&mut tape, task, cons, lambda)?
        };
        let task_v = tape.value(task).item()?.as_f64();
        let total_v = tape.value(total).item()?;
        if !task_v.is_finite() || !total_v.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                step,
                batch_seed,
            });
        }
        task_sum += task_v * idx.len() as f64;
        hits += correct(tape.value(out.logits), &batch.labels);

        let grads = tape.backward(total)?;
        model.store.zero_grads();
        model.store.accumulate(&grads, &out.bindings);
        optim.apply(&mut model.store);
    }
    Ok(EpochMetrics {
        epoch,
        task_loss: task_sum / data.len() as f64,
        cons_loss: if cons_steps > 0 { cons_sum / cons_steps as f64 } else { 0.0 },
        accuracy: hits as f64 / data.len() as f64,
        skipped_cons: skipped,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    pub task_loss: f64,
    /// Consistency loss over triplets mined in fixed-seed batches.
    pub cons_loss: f64,
    pub accuracy: f64,
}

/// Inference-mode loss and accuracy over a split.
pub fn evaluate<R: Real>(model: &mut Model<R>, data: &Split, batch_size: usize, alpha: f64) -> Result<EvalMetrics> {
    let (mut task_sum, mut cons_sum, mut hits, mut cons_steps) = (0.0, 0.0, 0usize, 0usize);
    let idx: Vec<usize> = (0..data.len()).collect();
    for (step, chunk) in idx.chunks(batch_size.max(1)).enumerate() {
        let batch = Batch::<R>::gather(data, chunk, false, 0);
        let mut tape = Tape::new();
        let images = tape.constant(batch.images);
        let out = model.forward(&mut tape, images, Mode::Eval)?;
        let task = loss::cross_entropy(&mut tape, out.logits, &batch.labels)?;
        task_sum += tape.value(task).item()?.as_f64() * chunk.len() as f64;
        hits += correct(tape.value(out.logits), &batch.labels);
        let mut rng = ChaCha8Rng::seed_from_u64(step as u64);
        let triplets = mine_triplets(&batch.labels, &mut rng);
        if !triplets.is_empty() {
            let pick = |f: fn(&TripletIndex) -> usize| triplets.iter().map(f).collect::<Vec<_>>();
            let a = tape.select(out.warped, &pick(|t| t.anchor))?;
            let p = tape.select(out.warped, &pick(|t| t.positive))?;
            let n = tape.select(out.warped, &pick(|t| t.negative))?;
            let c = loss::consistency_triplet_loss(&mut tape, a, p, n, R::from_f64(alpha))?;
            cons_sum += tape.value(c).item()?.as_f64() / triplets.len() as f64;
            cons_steps += 1;
        }
    }
    Ok(EvalMetrics {
        task_loss: task_sum / data.len() as f64,
        cons_loss: if cons_steps > 0 { cons_sum / cons_steps as f64 } else { 0.0 },
        accuracy: hits as f64 / data.len() as f64,
    })
}

/// Inference-mode warped features, one flat vector per image.
pub fn warped_features<R: Real>(model: &mut Model<R>, data: &Split, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let mut feats = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = Batch::<R>::gather(data, chunk, false, 0);
        let mut tape = Tape::new();
        let images = tape.constant(batch.images);
        let out = model.forward(&mut tape, images, Mode::Eval)?;
        let v = tape.value(out.warped);
        let per = v.len() / chunk.len();
        feats.extend(v.data().chunks_exact(per).map(|f| f.iter().map(|x| x.as_f64()).collect()));
    }
    Ok(feats)
}

/// Mean Euclidean distance over all same-class pairs.
pub fn mean_intra_class_distance(features: &[Vec<f64>], labels: &[usize]) -> f64 {
    let (mut sum, mut pairs) = (0.0, 0usize);
    for i in 0..features.len() {
        for j in i + 1..features.len() {
            if labels[i] != labels[j] {
                continue;
            }
            let d2: f64 = features[i].iter().zip(&features[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            sum += d2.sqrt();
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        sum / pairs as f64
    }
}

/// Per-epoch history of a full run.
#[derive(Clone, Debug, PartialEq)]
pub struct FitRecord {
    pub train: EpochMetrics,
    pub test: Option<EvalMetrics>,
}

/// Epoch-at-a-time driver holding the optimizer and shuffling state, so a
/// caller can inspect or persist the model between epochs.
pub struct Trainer<R> {
    cfg: TrainConfig,
    optim: OptimState<R>,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl<R: Real> Trainer<R> {
    pub fn new(model: &Model<R>, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            cfg: cfg.clone(),
            optim: OptimState::new(&model.store, cfg.lr, cfg.momentum, cfg.weight_decay),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            epoch: 0,
        })
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn done(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    /// Trains one epoch, then evaluates on `test` when given.
    pub fn step(&mut self, model: &mut Model<R>, train: &Split, test: Option<&Split>) -> Result<FitRecord> {
        self.optim.lr = R::from_f64(self.cfg.lr_at(self.epoch));
        let tr = train_epoch(model, train, &mut self.optim, &self.cfg, self.epoch, &mut self.rng)?;
        let te = match test {
            Some(t) => Some(evaluate(model, t, self.cfg.batch_size.max(64), self.cfg.alpha)?),
            None => None,
        };
        self.epoch += 1;
        Ok(FitRecord { train: tr, test: te })
    }
}

/// Runs `cfg.epochs` epochs, evaluating on `test` after each when given.
/// `on_epoch` sees each record as it is produced.
pub fn fit<R: Real>(
    model: &mut Model<R>,
    train: &Split,
    test: Option<&Split>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&FitRecord),
) -> Result<Vec<FitRecord>> {
    let mut trainer = Trainer::new(model, cfg)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    while !trainer.done() {
        let rec = trainer.step(model, train, test)?;
        on_epoch(&rec);
        history.push(rec);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_pairs_give_four_triplets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = mine_triplets(&[0, 0, 1, 1], &mut rng);
        assert_eq!(t.len(), 4);
        for tr in &t {
            let l = [0, 0, 1, 1];
            assert_eq!(l[tr.anchor], l[tr.positive]);
            assert_ne!(tr.anchor, tr.positive);
            assert_ne!(l[tr.anchor], l[tr.negative]);
        }
        assert_eq!(t[0], TripletIndex { anchor: 0, positive: 1, negative: t[0].negative });
    }

    #[test]
    fn no_positives_no_triplets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(mine_triplets(&[0, 1, 2, 3], &mut rng).is_empty());
        assert!(mine_triplets(&[5, 5, 5], &mut rng).is_empty());
    }

    #[test]
    fn mining_is_deterministic_per_seed() {
        let labels = [0, 1, 0, 2, 1, 2, 0, 1];
        let a = mine_triplets(&labels, &mut ChaCha8Rng::seed_from_u64(9));
        let b = mine_triplets(&labels, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn lr_schedule_drops_at_two_thirds() {
        let cfg = TrainConfig {
            epochs: 9,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(5), 0.01);
        assert!((cfg.lr_at(6) - 0.001).abs() < 1e-15);
    }
}
