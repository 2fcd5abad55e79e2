//! The volumetric transformer layer.
//!
//! Pipeline for a feature map `U: [B,H,W,K]` split into `C` contiguous
//! channel groups:
//!
//! 1. group sampling: per-group channel max and mean, then group norm
//!    without affine terms over each group's `(max, avg)` pair;
//! 2. estimator: an encoder-decoder whose spatial convolutions are shared
//!    by all group-channels, with learned channel squeeze (encoder) and
//!    expansion (decoder) matrices mixing information across groups, and a
//!    zero-initialised head emitting one logit per window candidate;
//! 3. candidate probabilities: softmax over the `(2r+1)²` window of the raw
//!    pooled responses plus the logits, divided by the temperature `β`;
//! 4. warp field: the probability-weighted mean window offset per group;
//! 5. every channel of group `c` is bilinearly warped by field `c`.

pub mod ops;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv, ConvBlock, Ctx};
use crate::param::{ParamId, ParamStore};
use crate::sampler::WarpField;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

pub use ops::{candidate_count, window_offsets};

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// How the head output becomes a warp field.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    /// Candidate logits, softmax, expected offset.
    Probabilistic,
    /// Two outputs per group, `r · tanh(·)` used directly as the offset.
    Direct,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VtnConfig {
    /// Number of channel groups `C`.
    pub groups: usize,
    /// Candidate window radius `r`; the window is `(2r+1)²`.
    pub radius: usize,
    /// Softmax temperature `β`.
    pub beta: f64,
    /// Encoder/decoder depth `L`.
    pub levels: usize,
    /// Spatial feature width `D` of the shared convolutions.
    pub feature_dim: usize,
    /// Group-channel width after each encoder squeeze.
    pub squeeze_widths: Vec<usize>,
    /// `false` drops the squeeze/expansion matrices: each group is
    /// estimated independently.
    pub channel_mixing: bool,
    pub head: HeadKind,
    /// Spatial kernel of every estimator convolution, including the head.
    pub kernel: usize,
}

impl VtnConfig {
    /// Desk-scale defaults: `r = 2`, `β = 10`, two levels of width 8,
    /// squeeze widths halving from `C`.
    pub fn new(groups: usize) -> Self {
        let levels = 2;
        VtnConfig {
            groups,
            radius: 2,
            beta: 10.0,
            levels,
            feature_dim: 8,
            squeeze_widths: Self::halving_widths(groups, levels),
            channel_mixing: true,
            head: HeadKind::Probabilistic,
            kernel: 3,
        }
    }

    pub fn halving_widths(groups: usize, levels: usize) -> Vec<usize> {
        let mut w = groups;
        (0..levels)
            .map(|_| {
                w = (w / 2).max(1);
                w
            })
            .collect()
    }

    pub fn candidates(&self) -> usize {
        candidate_count(self.radius)
    }

    /// Group-channel width entering each encoder level, plus the bottleneck.
    pub fn level_widths(&self) -> Vec<usize> {
        let mut v = vec![self.groups];
        if self.channel_mixing {
            v.extend_from_slice(&self.squeeze_widths);
        } else {
            v.extend(core::iter::repeat(self.groups).take(self.levels));
        }
        v
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.groups == 0 || channels % self.groups != 0 {
            return Err(Error::config(format!(
                "groups C={} must divide the {} feature channels",
                self.groups, channels
            )));
        }
        if self.radius == 0 {
            return Err(Error::config("window radius must be >= 1"));
        }
        if !(self.beta > 0.0) {
            return Err(Error::config(format!("temperature beta must be > 0, got {}", self.beta)));
        }
        if self.feature_dim == 0 || self.kernel % 2 == 0 {
            return Err(Error::config("feature_dim must be >= 1 and kernel odd"));
        }
        if self.squeeze_widths.len() != self.levels {
            return Err(Error::config(format!(
                "{} squeeze widths given for {} levels",
                self.squeeze_widths.len(),
                self.levels
            )));
        }
        let mut prev = self.groups;
        for &w in &self.squeeze_widths {
            // a single group-channel cannot shrink further
            let reduces = w < prev || (w == 1 && prev == 1);
            if w == 0 || !reduces {
                return Err(Error::config(format!(
                    "squeeze must reduce width: {prev} -> {w}"
                )));
            }
            prev = w;
        }
        Ok(())
    }

    pub fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        let m = 1usize << self.levels;
        if h % m != 0 || w % m != 0 {
            let pad = |n: usize| (m - n % m) % m;
            return Err(Error::config(format!(
                "spatial size {h}x{w} must be divisible by 2^L = {m}; pad by {}x{}",
                pad(h),
                pad(w)
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Level {
    block: ConvBlock,
    mix: Option<ParamId>,
}

/// Parameter handles of one VTN layer.
#[derive(Clone, Debug)]
pub struct VtnParams {
    cfg: VtnConfig,
    encoder: Vec<Level>,
    decoder: Vec<Level>,
    head: Conv,
}

impl VtnParams {
    pub fn new<R: Real, G: Rng>(store: &mut ParamStore<R>, prefix: &str, cfg: &VtnConfig, rng: &mut G) -> Self {
        let widths = cfg.level_widths();
        let d = cfg.feature_dim;
        let mix = |store: &mut ParamStore<R>, name: &str, from: usize, to: usize, rng: &mut G| {
            cfg.channel_mixing
                .then(|| store.add_he(format!("{prefix}.{name}"), &[from, to], 2 * from, rng))
        };
        let mut encoder = Vec::with_capacity(cfg.levels);
        for l in 0..cfg.levels {
            let cin = if l == 0 { 2 } else { d };
            let block = ConvBlock::new(store, &format!("{prefix}.enc{}", l + 1), cfg.kernel, cin, d, rng);
            let m = mix(store, &format!("enc{}.squeeze", l + 1), widths[l], widths[l + 1], rng);
            encoder.push(Level { block, mix: m });
        }
        let mut decoder = Vec::with_capacity(cfg.levels);
        for l in 0..cfg.levels {
            let block = ConvBlock::new(store, &format!("{prefix}.dec{}", l + 1), cfg.kernel, d, d, rng);
            let (from, to) = (widths[cfg.levels - l], widths[cfg.levels - l - 1]);
            let m = mix(store, &format!("dec{}.expand", l + 1), from, to, rng);
            decoder.push(Level { block, mix: m });
        }
        let outputs = match cfg.head {
            HeadKind::Probabilistic => cfg.candidates(),
            HeadKind::Direct => 2,
        };
        let head = Conv::zeros(store, &format!("{prefix}.head"), cfg.kernel, d, outputs);
        VtnParams {
            cfg: cfg.clone(),
            encoder,
            decoder,
            head,
        }
    }

    pub fn config(&self) -> &VtnConfig {
        &self.cfg
    }

    pub fn head(&self) -> &Conv {
        &self.head
    }

    pub fn squeeze_ids(&self) -> Vec<ParamId> {
        self.encoder.iter().filter_map(|l| l.mix).collect()
    }

    pub fn expand_ids(&self) -> Vec<ParamId> {
        self.decoder.iter().filter_map(|l| l.mix).collect()
    }
}

/// Tape handles produced by one VTN forward pass.
#[derive(Clone, Copy, Debug)]
pub struct VtnOutput {
    /// Warped features `[B,H,W,K]`.
    pub warped: Var,
    /// Fields `[B,C,H,W,2]`.
    pub field: Var,
    /// Raw pooled responses `[B,H,W,C,2]`.
    pub pooled: Var,
    /// Normalized grouped responses `[B,H,W,C,2]`.
    pub grouped: Var,
    /// Head output `[B,C,H,W,N]` (or `[B,C,H,W,2]` for the direct head).
    pub logits: Var,
    /// Candidate probabilities `[B,C,H,W,N]`, probabilistic head only.
    pub probs: Option<Var>,
}

/// Group sampling and normalization on the tape. Returns
/// `(raw pooled, normalized)`, both `[B,H,W,C,2]`.
pub fn group_sample_normalize_var<R: Real>(tape: &mut Tape<R>, u: Var, groups: usize) -> Result<(Var, Var)> {
    let pooled = tape.group_pool(u, groups)?;
    let s = tape.shape(pooled).to_vec();
    let flat = tape.reshape(pooled, &[s[0], s[1], s[2], 2 * groups])?;
    let normed = tape.group_norm(flat, groups, R::from_f64(GROUP_NORM_EPS))?;
    let x = tape.reshape(normed, &s)?;
    Ok((pooled, x))
}

/// Normalized grouped responses `[H,W,C,2]` (slot 0 max, slot 1 mean) of a
/// single `[H,W,K]` feature map.
pub fn group_sample_normalize<R: Real>(u: &Tensor<R>, cfg: &VtnConfig) -> Result<Tensor<R>> {
    let s = u.shape();
    if s.len() != 3 {
        return Err(Error::dim("group_sample_normalize", s, &[0, 0, 0]));
    }
    cfg.validate(s[2])?;
    let mut tape = Tape::new();
    let x = tape.constant(u.clone().reshape(&[1, s[0], s[1], s[2]])?);
    let (_, g) = group_sample_normalize_var(&mut tape, x, cfg.groups)?;
    tape.value(g).clone().reshape(&[s[0], s[1], cfg.groups, 2])
}

/// `Y[..., K_in] · W_cs[K_in × K']`.
pub fn channel_squeeze<R: Real>(tape: &mut Tape<R>, y: Var, w: Var) -> Result<Var> {
    let (sy, sw) = (tape.shape(y).to_vec(), tape.shape(w).to_vec());
    if sw.len() != 2 || sy.last() != Some(&sw[0]) {
        return Err(Error::dim("channel_squeeze", &sy, &sw));
    }
    if sw[1] >= sw[0] && sw[0] > 1 {
        return Err(Error::config(format!("squeeze must reduce channels: {} -> {}", sw[0], sw[1])));
    }
    mix_channels(tape, y, w, &sy, &sw)
}

/// `Z[..., K'] · W_ce[K' × K_out]`.
pub fn channel_expand<R: Real>(tape: &mut Tape<R>, z: Var, w: Var) -> Result<Var> {
    let (sz, sw) = (tape.shape(z).to_vec(), tape.shape(w).to_vec());
    if sw.len() != 2 || sz.last() != Some(&sw[0]) {
        return Err(Error::dim("channel_expand", &sz, &sw));
    }
    if sw[1] < sw[0] {
        return Err(Error::config(format!("expansion must not reduce channels: {} -> {}", sw[0], sw[1])));
    }
    mix_channels(tape, z, w, &sz, &sw)
}

fn mix_channels<R: Real>(tape: &mut Tape<R>, y: Var, w: Var, sy: &[usize], sw: &[usize]) -> Result<Var> {
    let rows: usize = sy[..sy.len() - 1].iter().product();
    let flat = tape.reshape(y, &[rows, sw[0]])?;
    let out = tape.matmul(flat, w)?;
    let mut shape = sy.to_vec();
    *shape.last_mut().unwrap() = sw[1];
    tape.reshape(out, &shape)
}

/// Applies a mixing matrix to `[B·w, H, W, D]` group-channel maps.
fn mix_group_channels<R: Real>(
    ctx: &mut Ctx<'_, R>,
    store: &ParamStore<R>,
    y: Var,
    id: ParamId,
    batch: usize,
    squeeze: bool,
) -> Result<Var> {
    let s = ctx.tape.shape(y).to_vec();
    let width = s[0] / batch;
    let w = ctx.param(store, id);
    let t = ctx.tape.reshape(y, &[batch, width, s[1], s[2], s[3]])?;
    let t = ctx.tape.permute(t, &[0, 2, 3, 4, 1])?;
    let t = if squeeze {
        channel_squeeze(ctx.tape, t, w)?
    } else {
        channel_expand(ctx.tape, t, w)?
    };
    let out_w = *ctx.tape.shape(t).last().unwrap();
    let t = ctx.tape.permute(t, &[0, 4, 1, 2, 3])?;
    ctx.tape.reshape(t, &[batch * out_w, s[1], s[2], s[3]])
}

/// Encoder-decoder transformation estimator: normalized grouped responses
/// `[B,H,W,C,2]` to head output `[B,C,H,W,N]`.
pub fn estimate_logits<R: Real>(
    ctx: &mut Ctx<'_, R>,
    store: &ParamStore<R>,
    params: &VtnParams,
    x: Var,
) -> Result<Var> {
    let cfg = &params.cfg;
    let s = ctx.tape.shape(x).to_vec();
    if s.len() != 5 || s[3] != cfg.groups || s[4] != 2 {
        return Err(Error::dim("estimate_logits", &s, &[0, 0, 0, cfg.groups, 2]));
    }
    let (batch, h, w) = (s[0], s[1], s[2]);
    cfg.check_spatial(h, w)?;
    let y = ctx.tape.permute(x, &[0, 3, 1, 2, 4])?;
    let mut y = ctx.tape.reshape(y, &[batch * cfg.groups, h, w, 2])?;
    for level in &params.encoder {
        y = level.block.forward(ctx, store, y)?;
        if let Some(id) = level.mix {
            y = mix_group_channels(ctx, store, y, id, batch, true)?;
        }
        y = ctx.tape.maxpool2(y)?;
    }
    for level in &params.decoder {
        y = level.block.forward(ctx, store, y)?;
        if let Some(id) = level.mix {
            y = mix_group_channels(ctx, store, y, id, batch, false)?;
        }
        y = ctx.tape.upsample2(y)?;
    }
    let e = params.head.forward(ctx, store, y)?;
    let n = *ctx.tape.shape(e).last().unwrap();
    ctx.tape.reshape(e, &[batch, cfg.groups, h, w, n])
}

/// Candidate probabilities from head logits and raw pooled responses.
pub fn infer_probabilities<R: Real>(tape: &mut Tape<R>, logits: Var, pooled: Var, cfg: &VtnConfig) -> Result<Var> {
    tape.candidate_probs(logits, pooled, cfg.radius, R::from_f64(cfg.beta))
}

/// Expected offsets `[B,C,H,W,2]` from probabilities `[B,C,H,W,N]`.
pub fn aggregate_warp_field_var<R: Real>(tape: &mut Tape<R>, probs: Var, cfg: &VtnConfig) -> Result<Var> {
    tape.aggregate_field(probs, cfg.radius)
}

/// Splits a `[C,H,W,2]` (or `[1,C,H,W,2]`) field tensor into per-group fields.
pub fn split_fields<R: Real>(field: &Tensor<R>) -> Result<Vec<WarpField<R>>> {
    let s = field.shape();
    let (c, h, w) = match s {
        [1, c, h, w, 2] | [c, h, w, 2] => (*c, *h, *w),
        _ => return Err(Error::dim("split_fields", s, &[0, 0, 0, 2])),
    };
    let per = h * w * 2;
    (0..c)
        .map(|g| WarpField::new(Tensor::new(&[h, w, 2], field.data()[g * per..(g + 1) * per].to_vec())?))
        .collect()
}

/// Expected-offset fields for a single `[H,W,N,C]`-style probability volume,
/// given here in the internal `[C,H,W,N]` layout.
pub fn aggregate_warp_field<R: Real>(probs: &Tensor<R>, cfg: &VtnConfig) -> Result<Vec<WarpField<R>>> {
    let s = probs.shape();
    if s.len() != 4 || s[3] != cfg.candidates() {
        return Err(Error::dim("aggregate_warp_field", s, &[0, 0, 0, cfg.candidates()]));
    }
    let g = ops::aggregate_field(probs.data(), cfg.radius);
    split_fields(&Tensor::new(&[s[0], s[1], s[2], 2], g)?)
}

/// Full layer forward on `[B,H,W,K]` features.
pub fn vtn_forward<R: Real>(
    ctx: &mut Ctx<'_, R>,
    store: &ParamStore<R>,
    params: &VtnParams,
    u: Var,
) -> Result<VtnOutput> {
    let cfg = &params.cfg;
    let s = ctx.tape.shape(u).to_vec();
    if s.len() != 4 {
        return Err(Error::dim("vtn_forward", &s, &[0, 0, 0, 0]));
    }
    cfg.validate(s[3])?;
    let (pooled, grouped) = group_sample_normalize_var(ctx.tape, u, cfg.groups)?;
    let logits = estimate_logits(ctx, store, params, grouped)?;
    let (field, probs) = match cfg.head {
        HeadKind::Probabilistic => {
            let p = infer_probabilities(ctx.tape, logits, pooled, cfg)?;
            (aggregate_warp_field_var(ctx.tape, p, cfg)?, Some(p))
        }
        HeadKind::Direct => {
            let t = ctx.tape.tanh(logits);
            (ctx.tape.scale(t, R::from_usize(cfg.radius)), None)
        }
    };
    let warped = ctx.tape.warp_sample(u, field)?;
    Ok(VtnOutput {
        warped,
        field,
        pooled,
        grouped,
        logits,
        probs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let cfg = VtnConfig::new(8);
        assert!(cfg.validate(16).is_ok());
        assert!(matches!(cfg.validate(12), Err(Error::Config(_))));
        let mut bad = cfg.clone();
        bad.squeeze_widths = vec![8, 4];
        assert!(bad.validate(16).is_err());
        let mut bad = cfg.clone();
        bad.beta = 0.0;
        assert!(bad.validate(16).is_err());
        assert!(VtnConfig::new(1).validate(16).is_ok());
        assert_eq!(VtnConfig::new(8).squeeze_widths, vec![4, 2]);
        assert_eq!(VtnConfig::new(1).squeeze_widths, vec![1, 1]);
    }

    #[test]
    fn spatial_check_suggests_padding() {
        let cfg = VtnConfig::new(2);
        match cfg.check_spatial(6, 8) {
            Err(Error::Config(msg)) => assert!(msg.contains("pad by 2x0"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn constant_channels_pool_then_normalize_to_zero() {
        // K=4, C=2, channels [a,a,b,b]
        let (a, b) = (1.5f64, -0.5f64);
        let u = Tensor::from_fn(&[4, 4, 4], |i| if i % 4 < 2 { a } else { b });
        let (raw, _) = ops::group_pool(u.data(), 4, 2);
        assert_eq!(&raw[..4], &[a, a, b, b]);
        let x = group_sample_normalize(&u, &VtnConfig::new(2)).unwrap();
        assert!(x.data().iter().all(|&v| v == 0.0));
    }
}
