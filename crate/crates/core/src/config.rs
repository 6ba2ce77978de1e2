//! Flat `key=value` configuration covering data, model and training settings.
//!
//! Files hold one `key=value` per line; `#` starts a comment. Unknown keys are
//! errors so typos never pass silently. Every key has a default, listed by
//! [`KEYS`] in a fixed order.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{config_err, CoreError, Result};
use crate::model::adm::ConvSpec;
use crate::model::{Activation, AdmConfig, BackboneConfig};
use crate::pipeline::{AdaptConfig, Precision};
use crate::synthdata::DomainSpec;

/// Everything a command needs, before deriving the per-module configs.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub data: DomainSpec,
    pub adapt: AdaptConfig,
    pub patch_side: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    pub feature_dim: usize,
    /// `None` picks `layers / 2 + 1`.
    pub attn_start: Option<usize>,
    pub ema_lambda: f64,
    pub ema_swap: bool,
    pub activation: Activation,
    pub adm_channels: Vec<usize>,
    pub adm_strides: Vec<usize>,
    pub adm_head_hidden: usize,
}

impl Default for Config {
    fn default() -> Self {
        let bb = BackboneConfig::default();
        let adm = AdmConfig::toy(bb.embed_dim, bb.patches_per_side(), bb.feature_dim, bb.num_classes);
        Self {
            data: DomainSpec::default(),
            adapt: AdaptConfig::default(),
            patch_side: bb.patch_side,
            embed_dim: bb.embed_dim,
            heads: bb.heads,
            layers: bb.layers,
            mlp_hidden: bb.mlp_hidden,
            feature_dim: bb.feature_dim,
            attn_start: None,
            ema_lambda: bb.ema_lambda,
            ema_swap: bb.ema_swap,
            activation: bb.activation,
            adm_channels: adm.convs.iter().map(|c| c.out_channels).collect(),
            adm_strides: adm.convs.iter().map(|c| c.stride).collect(),
            adm_head_hidden: adm.head_hidden,
        }
    }
}

/// One configuration key.
pub struct Key {
    pub name: &'static str,
    pub help: &'static str,
    set: fn(&mut Config, &str) -> Result<()>,
    get: fn(&Config) -> String,
}

impl Key {
    /// The key's value in the default configuration.
    pub fn default_value(&self) -> String {
        (self.get)(&Config::default())
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse().map_err(|e| CoreError::Config(format!("{key}: cannot parse {v:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    v.split(',').map(|p| parse(key, p.trim())).collect()
}

fn list<T: Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

macro_rules! key {
    ($name:literal, $help:literal, |$c:ident| $field:expr) => {
        Key {
            name: $name,
            help: $help,
            set: |$c, v| {
                $field = parse($name, v)?;
                Ok(())
            },
            get: |$c| $field.to_string(),
        }
    };
}

/// Every key, in the order `--help` lists them.
pub const KEYS: &[Key] = &[
    Key {
        name: "seed",
        help: "seed for data generation, initialization and shuffling",
        set: |c, v| {
            let s = parse("seed", v)?;
            c.data.seed = s;
            c.adapt.seed = s;
            Ok(())
        },
        get: |c| c.adapt.seed.to_string(),
    },
    key!("num_classes", "number of classes", |c| c.data.num_classes),
    key!("per_class", "samples per class in each domain", |c| c.data.per_class),
    key!("image_side", "image height and width in pixels", |c| c.data.image_side),
    key!("source_noise", "pixel noise std of source images", |c| c.data.source_noise),
    key!("easy_noise", "pixel noise std of easy target images", |c| c.data.easy_noise),
    key!("brightness", "maximum brightness shift of target images", |c| c.data.brightness),
    key!("rotation_min", "smallest hard-sample rotation in degrees", |c| c.data.rotation.0),
    key!("rotation_max", "largest hard-sample rotation in degrees", |c| c.data.rotation.1),
    key!("occlusion", "side of the square occluding hard samples", |c| c.data.occlusion),
    key!("hard_noise", "pixel noise std of hard target images", |c| c.data.hard_noise),
    key!("hard_fraction", "fraction of target samples that are hard", |c| c.data.hard_fraction),
    key!("patch_side", "patch side in pixels", |c| c.patch_side),
    key!("embed_dim", "token width", |c| c.embed_dim),
    key!("heads", "attention heads per layer", |c| c.heads),
    key!("layers", "encoder layers", |c| c.layers),
    key!("mlp_hidden", "hidden width of each encoder MLP", |c| c.mlp_hidden),
    key!("feature_dim", "width of the feature head output", |c| c.feature_dim),
    Key {
        name: "attn_start",
        help: "first layer (1-based) entering the attention average; auto = layers/2+1",
        set: |c, v| {
            c.attn_start = if v == "auto" { None } else { Some(parse("attn_start", v)?) };
            Ok(())
        },
        get: |c| c.attn_start.map_or("auto".into(), |s| s.to_string()),
    },
    key!("ema_lambda", "attention average weight λ", |c| c.ema_lambda),
    key!("ema_swap", "exchange the roles of λ and 1−λ in the attention average", |c| c.ema_swap),
    Key {
        name: "mlp_activation",
        help: "encoder MLP nonlinearity: relu or gelu",
        set: |c, v| {
            c.activation = match v {
                "relu" => Activation::Relu,
                "gelu" => Activation::Gelu,
                _ => return config_err(format!("mlp_activation: expected relu or gelu, got {v:?}")),
            };
            Ok(())
        },
        get: |c| match c.activation {
            Activation::Relu => "relu".into(),
            Activation::Gelu => "gelu".into(),
        },
    },
    Key {
        name: "adm_channels",
        help: "output channels of each assistant convolution",
        set: |c, v| {
            c.adm_channels = parse_list("adm_channels", v)?;
            Ok(())
        },
        get: |c| list(&c.adm_channels),
    },
    Key {
        name: "adm_strides",
        help: "stride of each assistant convolution",
        set: |c, v| {
            c.adm_strides = parse_list("adm_strides", v)?;
            Ok(())
        },
        get: |c| list(&c.adm_strides),
    },
    key!("adm_head_hidden", "hidden width of the assistant classifier", |c| c.adm_head_hidden),
    key!("lr", "source-stage learning rate", |c| c.adapt.lr),
    key!("target_lr_scale", "target-stage learning rate as a multiple of lr", |c| c.adapt.target_lr_scale),
    key!("momentum", "SGD momentum", |c| c.adapt.momentum),
    key!("weight_decay", "SGD weight decay", |c| c.adapt.weight_decay),
    key!("batch_size", "mini-batch size (at least 2)", |c| c.adapt.batch_size),
    key!("source_epochs", "source-stage epochs", |c| c.adapt.source_epochs),
    key!("target_epochs", "target-stage epochs", |c| c.adapt.target_epochs),
    key!("alpha", "weight of the consistency loss", |c| c.adapt.weights.alpha),
    key!("beta", "weight of the conditional MMD loss", |c| c.adapt.weights.beta),
    key!("centroid_momentum", "weight λ_c of the previous centroid during refinement", |c| c.adapt.centroids.momentum),
    key!("refine_rounds", "centroid refinement rounds", |c| c.adapt.centroids.rounds),
    key!("k", "neighbours voting on each hard sample", |c| c.adapt.k),
    Key {
        name: "kernel_multipliers",
        help: "bandwidth multipliers of the kernel family (uniform weights)",
        set: |c, v| {
            let m: Vec<f64> = parse_list("kernel_multipliers", v)?;
            c.adapt.kernel.weights = vec![1.0 / m.len() as f64; m.len()];
            c.adapt.kernel.multipliers = m;
            Ok(())
        },
        get: |c| list(&c.adapt.kernel.multipliers),
    },
    Key {
        name: "kernel_bandwidth",
        help: "fixed base kernel bandwidth σ; median = median-distance heuristic",
        set: |c, v| {
            c.adapt.kernel.bandwidth = if v == "median" { None } else { Some(parse("kernel_bandwidth", v)?) };
            Ok(())
        },
        get: |c| c.adapt.kernel.bandwidth.map_or("median".into(), |b| b.to_string()),
    },
    key!("mmd_pooled", "compare easy and hard sets as wholes instead of per class", |c| c.adapt.kernel.pooled),
    key!("distill_squared", "square the feature term of the distillation loss", |c| c.adapt.distill_squared),
    key!("lr_decay", "polynomial learning-rate decay", |c| c.adapt.lr_decay),
    Key {
        name: "precision",
        help: "training arithmetic: f32 or f64",
        set: |c, v| {
            c.adapt.precision = match v {
                "f32" => Precision::F32,
                "f64" => Precision::F64,
                _ => return config_err(format!("precision: expected f32 or f64, got {v:?}")),
            };
            Ok(())
        },
        get: |c| match c.adapt.precision {
            Precision::F32 => "f32".into(),
            Precision::F64 => "f64".into(),
        },
    },
];

pub fn key(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

/// Key names that fix the model layout; a checkpoint's values win for these.
pub const ARCHITECTURE_KEYS: &[&str] = &[
    "num_classes",
    "image_side",
    "patch_side",
    "embed_dim",
    "heads",
    "layers",
    "mlp_hidden",
    "feature_dim",
    "attn_start",
    "ema_lambda",
    "ema_swap",
    "mlp_activation",
    "adm_channels",
    "adm_strides",
    "adm_head_hidden",
];

/// `(key, value)` pairs of a config file, in file order.
pub fn parse_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return config_err(format!("line {}: expected key=value, got {line:?}", no + 1));
        };
        let (k, v) = (k.trim(), v.trim());
        if out.iter().any(|(seen, _)| seen == k) {
            return config_err(format!("line {}: duplicate key {k}", no + 1));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

impl Config {
    pub fn set(&mut self, name: &str, value: &str) -> Result<()> {
        match key(name) {
            Some(k) => (k.set)(self, value),
            None => config_err(format!("unknown config key {name:?}")),
        }
    }

    pub fn get(&self, name: &str) -> Option<String> {
        key(name).map(|k| (k.get)(self))
    }

    pub fn apply<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::Config(format!("cannot read {}: {e}", path.display())))?;
        let pairs = parse_text(&text)?;
        self.apply(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    /// Every key and its current value.
    pub fn snapshot(&self) -> BTreeMap<String, String> {
        KEYS.iter().map(|k| (k.name.to_string(), (k.get)(self))).collect()
    }

    /// The whole configuration as a config file.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{}={}\n", k.name, (k.get)(self))).collect()
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            in_channels: 1,
            image_side: self.data.image_side,
            patch_side: self.patch_side,
            embed_dim: self.embed_dim,
            heads: self.heads,
            layers: self.layers,
            mlp_hidden: self.mlp_hidden,
            feature_dim: self.feature_dim,
            num_classes: self.data.num_classes,
            attn_start: self.attn_start.unwrap_or(self.layers / 2 + 1),
            ema_lambda: self.ema_lambda,
            ema_swap: self.ema_swap,
            activation: self.activation,
        }
    }

    /// Assistant plan of padded 3×3 convolutions.
    pub fn adm(&self) -> Result<AdmConfig> {
        if self.adm_channels.len() != self.adm_strides.len() {
            return config_err("adm_channels and adm_strides must list the same number of convolutions");
        }
        let bb = self.backbone();
        Ok(AdmConfig {
            in_channels: bb.embed_dim,
            map_side: bb.patches_per_side(),
            convs: self
                .adm_channels
                .iter()
                .zip(&self.adm_strides)
                .map(|(&out_channels, &stride)| ConvSpec {
                    out_channels,
                    kernel: 3,
                    stride,
                    padding: 1,
                })
                .collect(),
            feature_dim: bb.feature_dim,
            head_hidden: self.adm_head_hidden,
            num_classes: bb.num_classes,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.backbone().validate()?;
        self.adm()?.validate()?;
        self.adapt.validate()
    }

}
