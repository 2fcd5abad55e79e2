//! Classifier builders: plain CNN, single-field (STN-style) warp and the
//! grouped VTN, all sharing one backbone and classifier.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{ConvBlock, Ctx, Linear, Mode};
use crate::param::{Bindings, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Real;
use crate::vtn::{vtn_forward, VtnConfig, VtnOutput, VtnParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Base,
    StnStyle,
    Vtn,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::StnStyle => "stn-style",
            Variant::Vtn => "vtn",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        match s {
            "base" => Some(Variant::Base),
            "stn-style" | "stn" => Some(Variant::StnStyle),
            "vtn" => Some(Variant::Vtn),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Classifier {
    /// Global average pool, then linear.
    GlobalAvgPool,
    /// Flatten the `H×W×K` map, then linear.
    Flatten,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub variant: Variant,
    pub input_hw: (usize, usize),
    pub in_channels: usize,
    /// Output widths of the three Convolution-BatchNorm-ReLU blocks.
    pub widths: [usize; 3],
    /// Whether block `i` is followed by 2×2 max pooling.
    pub pool_after: [bool; 3],
    pub classifier: Classifier,
    pub classes: usize,
    /// Parameter init seed.
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(variant: Variant, classes: usize, seed: u64) -> Self {
        ModelSpec {
            variant,
            input_hw: (32, 32),
            in_channels: 1,
            widths: [8, 16, 16],
            pool_after: [true, true, false],
            classifier: Classifier::GlobalAvgPool,
            classes,
            seed,
        }
    }

    /// Spatial size and channel count of the map the warp acts on.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        let pools = self.pool_after.iter().filter(|&&p| p).count();
        (self.input_hw.0 >> pools, self.input_hw.1 >> pools, self.widths[2])
    }
}

pub struct Model<R> {
    spec: ModelSpec,
    vtn_cfg: Option<VtnConfig>,
    pub store: ParamStore<R>,
    backbone: Vec<ConvBlock>,
    warp: Option<VtnParams>,
    fc: Linear,
}

/// Tape handles of one model forward.
pub struct ModelOutput {
    pub logits: Var,
    /// Backbone features entering the warp.
    pub features: Var,
    /// Warped features (equal to `features` for the base model).
    pub warped: Var,
    pub vtn: Option<VtnOutput>,
    pub bindings: Bindings,
}

/// Builds a model. `vtn_cfg` is required for [`Variant::Vtn`], forbidden for
/// [`Variant::Base`], and optional for [`Variant::StnStyle`], where it must
/// have a single group (the default single-group config is used otherwise).
pub fn build_model<R: Real>(spec: &ModelSpec, vtn_cfg: Option<&VtnConfig>) -> Result<Model<R>> {
    let cfg = match (spec.variant, vtn_cfg) {
        (Variant::Base, None) => None,
        (Variant::Base, Some(_)) => return Err(Error::config("base model takes no warp config")),
        (Variant::Vtn, Some(c)) => Some(c.clone()),
        (Variant::Vtn, None) => return Err(Error::config("vtn model needs a warp config")),
        (Variant::StnStyle, None) => Some(VtnConfig::new(1)),
        (Variant::StnStyle, Some(c)) if c.groups == 1 => Some(c.clone()),
        (Variant::StnStyle, Some(c)) => {
            return Err(Error::config(format!(
                "stn-style model uses one shared field, got {} groups",
                c.groups
            )))
        }
    };
    let (fh, fw, k) = spec.feature_shape();
    if let Some(c) = &cfg {
        c.validate(k)?;
        c.check_spatial(fh, fw)?;
    }
    if spec.classes < 2 {
        return Err(Error::config("need at least two classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut store = ParamStore::new();
    let mut backbone = Vec::with_capacity(3);
    let mut cin = spec.in_channels;
    for (i, &w) in spec.widths.iter().enumerate() {
        backbone.push(ConvBlock::new(&mut store, &format!("backbone.block{}", i + 1), 3, cin, w, &mut rng));
        cin = w;
    }
    // the warp draws from its own stream so that backbone and classifier
    // initialisation are identical across variants
    let mut warp_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7654_3210_fedc_ba98);
    let warp = cfg.as_ref().map(|c| VtnParams::new(&mut store, "vtn", c, &mut warp_rng));
    let fan_in = match spec.classifier {
        Classifier::GlobalAvgPool => k,
        Classifier::Flatten => fh * fw * k,
    };
    let fc = Linear::new(&mut store, "classifier", fan_in, spec.classes, &mut rng);
    Ok(Model {
        spec: spec.clone(),
        vtn_cfg: cfg,
        store,
        backbone,
        warp,
        fc,
    })
}

impl<R: Real> Model<R> {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn vtn_config(&self) -> Option<&VtnConfig> {
        self.vtn_cfg.as_ref()
    }

    pub fn vtn_params(&self) -> Option<&VtnParams> {
        self.warp.as_ref()
    }

    /// Forward on `[B,H,W,Cin]` images. Training mode also folds batch
    /// statistics into the running averages.
    pub fn forward(&mut self, tape: &mut Tape<R>, images: Var, mode: Mode) -> Result<ModelOutput> {
        let mut ctx = Ctx::new(tape, mode);
        let store = &self.store;
        let mut x = images;
        for (block, &pool) in self.backbone.iter().zip(&self.spec.pool_after) {
            x = block.forward(&mut ctx, store, x)?;
            if pool {
                x = ctx.tape.maxpool2(x)?;
            }
        }
        let features = x;
        let vtn = match &self.warp {
            Some(p) => Some(vtn_forward(&mut ctx, store, p, features)?),
            None => None,
        };
        let warped = vtn.map_or(features, |o| o.warped);
        let pooled = match self.spec.classifier {
            Classifier::GlobalAvgPool => ctx.tape.spatial_mean(warped)?,
            Classifier::Flatten => {
                let s = ctx.tape.shape(warped).to_vec();
                ctx.tape.reshape(warped, &[s[0], s[1] * s[2] * s[3]])?
            }
        };
        let logits = self.fc.forward(&mut ctx, store, pooled)?;
        let bindings = ctx.finish(&mut self.store);
        Ok(ModelOutput {
            logits,
            features,
            warped,
            vtn,
            bindings,
        })
    }
}

impl<R: Real> Clone for Model<R> {
    fn clone(&self) -> Self {
        Model {
            spec: self.spec.clone(),
            vtn_cfg: self.vtn_cfg.clone(),
            store: self.store.clone(),
            backbone: self.backbone.clone(),
            warp: self.warp.clone(),
            fc: self.fc.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn variant_config_pairing() {
        let base = ModelSpec::new(Variant::Base, 10, 0);
        assert!(build_model::<f64>(&base, Some(&VtnConfig::new(8))).is_err());
        let vtn = ModelSpec::new(Variant::Vtn, 10, 0);
        assert!(build_model::<f64>(&vtn, None).is_err());
        let stn = ModelSpec::new(Variant::StnStyle, 10, 0);
        assert!(build_model::<f64>(&stn, Some(&VtnConfig::new(8))).is_err());
        assert!(build_model::<f64>(&stn, None).is_ok());
    }

    #[test]
    fn base_logit_shape() {
        let mut m = build_model::<f64>(&ModelSpec::new(Variant::Base, 10, 3), None).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 32, 32, 1], |i| (i % 13) as f64 / 13.0));
        let out = m.forward(&mut tape, x, Mode::Train).unwrap();
        assert_eq!(tape.shape(out.logits), &[2, 10]);
    }
}
