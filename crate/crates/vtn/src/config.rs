//! Run configuration: a flat JSON object with an explicit schema version.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vtn_core::model::{Classifier, ModelSpec, Variant};
use vtn_core::train::TrainConfig;
use vtn_core::vtn::{HeadKind, VtnConfig};

use crate::error::{AppError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantName {
    Base,
    StnStyle,
    Vtn,
}

impl VariantName {
    pub const ALL: [VariantName; 3] = [VariantName::Base, VariantName::StnStyle, VariantName::Vtn];

    pub fn core(self) -> Variant {
        match self {
            VariantName::Base => Variant::Base,
            VariantName::StnStyle => Variant::StnStyle,
            VariantName::Vtn => Variant::Vtn,
        }
    }

    pub fn name(self) -> &'static str {
        self.core().name()
    }

    pub fn parse(s: &str) -> Option<Self> {
        Variant::parse(s).map(|v| match v {
            Variant::Base => VariantName::Base,
            Variant::StnStyle => VariantName::StnStyle,
            Variant::Vtn => VariantName::Vtn,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadName {
    Probabilistic,
    Direct,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierName {
    Gap,
    Flatten,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Scene spec JSON; the built-in benchmark when absent.
    pub dataset_spec: Option<PathBuf>,
    /// Output directory of `dataset-gen`; replaces rendering when set.
    pub dataset_dir: Option<PathBuf>,
    pub n_train: usize,
    pub n_test: usize,
    pub data_seed: u64,

    pub variant: VariantName,
    pub classifier: ClassifierName,
    /// Group count of the `vtn` variant; `stn-style` always uses one field.
    pub groups: usize,
    pub radius: usize,
    pub beta: f64,
    pub levels: usize,
    pub feature_dim: usize,
    /// Defaults to halving from the group count at every level.
    pub squeeze_widths: Option<Vec<usize>>,
    pub channel_mixing: bool,
    pub head: HeadName,
    pub kernel: usize,

    pub lambda: f64,
    pub alpha: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_at: f64,
    pub flip: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let vtn = VtnConfig::new(8);
        let train = TrainConfig::default();
        RunConfig {
            schema_version: SCHEMA_VERSION,
            dataset_spec: None,
            dataset_dir: None,
            n_train: 2000,
            n_test: 500,
            data_seed: 0,
            variant: VariantName::Vtn,
            classifier: ClassifierName::Gap,
            groups: vtn.groups,
            radius: vtn.radius,
            beta: vtn.beta,
            levels: vtn.levels,
            feature_dim: vtn.feature_dim,
            squeeze_widths: None,
            channel_mixing: vtn.channel_mixing,
            head: HeadName::Probabilistic,
            kernel: vtn.kernel,
            lambda: train.lambda,
            alpha: train.alpha,
            lr: train.lr,
            momentum: train.momentum,
            weight_decay: train.weight_decay,
            decay_at: train.decay_at,
            flip: train.flip,
            epochs: train.epochs,
            batch_size: train.batch_size,
            seed: train.seed,
            precision: Precision::F32,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    /// Parses and validates. Every error names the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| AppError::config("<document>", e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| AppError::config("<document>", "expected a JSON object"))?;
        match obj.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => {
                return Err(AppError::config(
                    "schema_version",
                    format!("unsupported version {v}, expected {SCHEMA_VERSION}"),
                ))
            }
            None => return Err(AppError::config("schema_version", "required unsigned integer")),
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." { "<document>".to_string() } else { path };
            AppError::config(field, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
        Self::from_json(&text)
    }

    /// Canonical serialization; field order is fixed by the struct.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization, hex encoded. The output
    /// directory is left out: it does not affect any result.
    pub fn hash(&self) -> String {
        let keyed = RunConfig {
            out_dir: PathBuf::new(),
            ..self.clone()
        };
        format!("{:x}", Sha256::digest(keyed.to_json().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(AppError::config("schema_version", format!("expected {SCHEMA_VERSION}")));
        }
        if self.dataset_spec.is_some() && self.dataset_dir.is_some() {
            return Err(AppError::config("dataset_dir", "give either dataset_spec or dataset_dir, not both"));
        }
        if self.dataset_dir.is_none() {
            if self.n_train == 0 {
                return Err(AppError::config("n_train", "must be >= 1"));
            }
            if self.n_test == 0 {
                return Err(AppError::config("n_test", "must be >= 1"));
            }
        }
        if self.batch_size == 0 {
            return Err(AppError::config("batch_size", "must be >= 1"));
        }
        let finite = [
            ("beta", self.beta),
            ("lambda", self.lambda),
            ("alpha", self.alpha),
            ("lr", self.lr),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("decay_at", self.decay_at),
        ];
        for (field, v) in finite {
            if !v.is_finite() {
                return Err(AppError::config(field, "must be finite"));
            }
        }
        if self.beta <= 0.0 {
            return Err(AppError::config("beta", "must be > 0"));
        }
        if self.lambda < 0.0 {
            return Err(AppError::config("lambda", "must be >= 0"));
        }
        if self.alpha <= 0.0 {
            return Err(AppError::config("alpha", "must be > 0"));
        }
        if self.lr < 0.0 {
            return Err(AppError::config("lr", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(AppError::config("momentum", "must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(AppError::config("weight_decay", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.decay_at) {
            return Err(AppError::config("decay_at", "must lie in [0, 1]"));
        }
        if let Some(cfg) = self.vtn_config() {
            // spatial fit is checked once the image size is known
            let k = self.model_spec(10, (32, 32)).feature_shape().2;
            cfg.validate(k)
                .map_err(|e| AppError::config(self.vtn_field_hint(&e), e.to_string()))?;
        }
        Ok(())
    }

    /// Best guess at which field a layer validation error refers to.
    fn vtn_field_hint(&self, e: &vtn_core::Error) -> &'static str {
        let msg = e.to_string();
        [
            ("groups", "groups"),
            ("radius", "radius"),
            ("beta", "beta"),
            ("squeeze", "squeeze_widths"),
            ("feature_dim", "feature_dim"),
            ("kernel", "kernel"),
            ("level", "levels"),
        ]
        .into_iter()
        .find(|(k, _)| msg.contains(k))
        .map_or("groups", |(_, f)| f)
    }

    pub fn model_spec(&self, classes: usize, input_hw: (usize, usize)) -> ModelSpec {
        ModelSpec {
            input_hw,
            classifier: match self.classifier {
                ClassifierName::Gap => Classifier::GlobalAvgPool,
                ClassifierName::Flatten => Classifier::Flatten,
            },
            ..ModelSpec::new(self.variant.core(), classes, self.seed)
        }
    }

    /// Layer config for warping variants, `None` for the base model.
    pub fn vtn_config(&self) -> Option<VtnConfig> {
        let groups = match self.variant {
            VariantName::Base => return None,
            VariantName::StnStyle => 1,
            VariantName::Vtn => self.groups,
        };
        let squeeze_widths = match (&self.squeeze_widths, self.variant) {
            (Some(w), VariantName::Vtn) => w.clone(),
            _ => VtnConfig::halving_widths(groups, self.levels),
        };
        Some(VtnConfig {
            groups,
            radius: self.radius,
            beta: self.beta,
            levels: self.levels,
            feature_dim: self.feature_dim,
            squeeze_widths,
            channel_mixing: self.channel_mixing,
            head: match self.head {
                HeadName::Probabilistic => HeadKind::Probabilistic,
                HeadName::Direct => HeadKind::Direct,
            },
            kernel: self.kernel,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            decay_at: self.decay_at,
            lambda: self.lambda,
            alpha: self.alpha,
            flip: self.flip,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field_of(text: &str) -> String {
        match RunConfig::from_json(text) {
            Err(AppError::Config { field, .. }) => field,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn missing_fields_take_defaults() {
        let cfg = RunConfig::from_json(r#"{"schema_version": 1, "epochs": 3}"#).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.groups, 8);
    }

    #[test]
    fn schema_version_is_required_and_checked() {
        assert_eq!(field_of(r#"{"epochs": 3}"#), "schema_version");
        assert_eq!(field_of(r#"{"schema_version": 2}"#), "schema_version");
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::from_json(r#"{"schema_version": 1, "lamda": 1.0}"#).unwrap_err();
        assert!(err.to_string().contains("lamda"), "{err}");
    }

    #[test]
    fn type_errors_name_the_field() {
        assert_eq!(field_of(r#"{"schema_version": 1, "alpha": "big"}"#), "alpha");
        assert_eq!(field_of(r#"{"schema_version": 1, "variant": "resnet"}"#), "variant");
    }

    #[test]
    fn semantic_errors_name_the_field() {
        assert_eq!(field_of(r#"{"schema_version": 1, "alpha": 0}"#), "alpha");
        assert_eq!(field_of(r#"{"schema_version": 1, "momentum": 1.5}"#), "momentum");
        assert_eq!(field_of(r#"{"schema_version": 1, "groups": 3}"#), "groups");
        assert_eq!(field_of(r#"{"schema_version": 1, "batch_size": 0}"#), "batch_size");
    }

    #[test]
    fn stn_style_forces_one_group() {
        let cfg = RunConfig {
            variant: VariantName::StnStyle,
            ..RunConfig::default()
        };
        let v = cfg.vtn_config().unwrap();
        assert_eq!(v.groups, 1);
        assert_eq!(v.squeeze_widths, vec![1, 1]);
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let b = RunConfig { seed: 1, ..a.clone() };
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        let c = RunConfig { out_dir: "elsewhere".into(), ..a.clone() };
        assert_eq!(a.hash(), c.hash());
    }
}
