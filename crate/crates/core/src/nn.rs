//! Small layer building blocks over the tape.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::Result;
use crate::param::{Bindings, ParamId, ParamStore};
use crate::tape::{BatchStats, Tape, Var};
use crate::tensor::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the old running statistic in each update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

struct BnUpdate<R> {
    mean: ParamId,
    var: ParamId,
    stats: BatchStats<R>,
}

/// State threaded through one forward pass.
pub struct Ctx<'t, R> {
    pub tape: &'t mut Tape<R>,
    pub bindings: Bindings,
    pub mode: Mode,
    bn_updates: Vec<BnUpdate<R>>,
}

impl<'t, R: Real> Ctx<'t, R> {
    pub fn new(tape: &'t mut Tape<R>, mode: Mode) -> Self {
        Ctx {
            tape,
            bindings: Bindings::new(),
            mode,
            bn_updates: Vec::new(),
        }
    }

    pub fn param(&mut self, store: &ParamStore<R>, id: ParamId) -> Var {
        store.bind(self.tape, id, &mut self.bindings)
    }

    /// Folds the batch statistics gathered in training mode into the
    /// running averages. Returns the bindings for gradient accumulation.
    pub fn finish(self, store: &mut ParamStore<R>) -> Bindings {
        let keep = R::from_f64(BN_MOMENTUM);
        let take = R::one() - keep;
        for u in self.bn_updates {
            for (id, batch) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
                let run = store.get_mut(id).value.data_mut();
                for (r, &b) in run.iter_mut().zip(batch) {
                    *r = keep * *r + take * b;
                }
            }
        }
        self.bindings
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

impl BatchNorm {
    pub fn new<R: Real>(store: &mut ParamStore<R>, prefix: &str, ch: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::ones(&[ch])),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[ch])),
            running_mean: store.add_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[ch])),
            running_var: store.add_buffer(format!("{prefix}.running_var"), Tensor::ones(&[ch])),
        }
    }

    pub fn forward<R: Real>(&self, ctx: &mut Ctx<'_, R>, store: &ParamStore<R>, x: Var) -> Result<Var> {
        let gamma = ctx.param(store, self.gamma);
        let beta = ctx.param(store, self.beta);
        let eps = R::from_f64(BN_EPS);
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = ctx.tape.batch_norm(x, gamma, beta, eps)?;
                ctx.bn_updates.push(BnUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    stats,
                });
                Ok(y)
            }
            Mode::Eval => {
                let mean = store.get(self.running_mean).value.data();
                let var = store.get(self.running_var).value.data();
                ctx.tape.batch_norm_eval(x, gamma, beta, mean, var, eps)
            }
        }
    }
}

/// Zero-padded odd-kernel convolution.
#[derive(Clone, Debug)]
pub struct Conv {
    w: ParamId,
    b: ParamId,
    pad: usize,
}

impl Conv {
    pub fn new<R: Real, G: Rng>(
        store: &mut ParamStore<R>,
        prefix: &str,
        kernel: usize,
        cin: usize,
        cout: usize,
        rng: &mut G,
    ) -> Self {
        Conv {
            w: store.add_he(format!("{prefix}.w"), &[kernel, kernel, cin, cout], kernel * kernel * cin, rng),
            b: store.add(format!("{prefix}.b"), Tensor::zeros(&[cout])),
            pad: kernel / 2,
        }
    }

    /// Weights and bias start at exactly zero.
    pub fn zeros<R: Real>(store: &mut ParamStore<R>, prefix: &str, kernel: usize, cin: usize, cout: usize) -> Self {
        Conv {
            w: store.add(format!("{prefix}.w"), Tensor::zeros(&[kernel, kernel, cin, cout])),
            b: store.add(format!("{prefix}.b"), Tensor::zeros(&[cout])),
            pad: kernel / 2,
        }
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> ParamId {
        self.b
    }

    pub fn forward<R: Real>(&self, ctx: &mut Ctx<'_, R>, store: &ParamStore<R>, x: Var) -> Result<Var> {
        let w = ctx.param(store, self.w);
        let b = ctx.param(store, self.b);
        ctx.tape.conv2d(x, w, b, 1, self.pad)
    }
}

/// Convolution-BatchNorm-ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    conv: Conv,
    bn: BatchNorm,
}

impl ConvBlock {
    pub fn new<R: Real, G: Rng>(
        store: &mut ParamStore<R>,
        prefix: &str,
        kernel: usize,
        cin: usize,
        cout: usize,
        rng: &mut G,
    ) -> Self {
        ConvBlock {
            conv: Conv::new(store, &format!("{prefix}.conv"), kernel, cin, cout, rng),
            bn: BatchNorm::new(store, &format!("{prefix}.bn"), cout),
        }
    }

    pub fn forward<R: Real>(&self, ctx: &mut Ctx<'_, R>, store: &ParamStore<R>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, store, x)?;
        let y = self.bn.forward(ctx, store, y)?;
        Ok(ctx.tape.relu(y))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new<R: Real, G: Rng>(store: &mut ParamStore<R>, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut G) -> Self {
        // variance 1/fan_in
        let w = store.add_he(format!("{prefix}.w"), &[fan_in, fan_out], 2 * fan_in, rng);
        Linear {
            w,
            b: store.add(format!("{prefix}.b"), Tensor::zeros(&[fan_out])),
        }
    }

    /// `[B, fan_in] -> [B, fan_out]`.
    pub fn forward<R: Real>(&self, ctx: &mut Ctx<'_, R>, store: &ParamStore<R>, x: Var) -> Result<Var> {
        let w = ctx.param(store, self.w);
        let b = ctx.param(store, self.b);
        let y = ctx.tape.matmul(x, w)?;
        ctx.tape.add_bias(y, b)
    }
}
