//! Flat `key = value` run configuration shared by every CLI command.
//!
//! Files hold one assignment per line; `#` starts a comment. Unknown keys and
//! repeated keys are errors. The resolved configuration is echoed in the same
//! syntax, so an echo parses back to an identical configuration.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::data::SynthSpec;
use crate::error::{config_err, Error, Result};
use crate::eval::{FinetuneConfig, ProbeConfig};
use crate::masking::BlockMaskConfig;
use crate::model::{ModelConfig, Tap};
use crate::momentum::{FractionMode, MomentumSchedule};
use crate::optim::AdamConfig;
use crate::train::{MaskStrategy, PretrainConfig, TargetKind};

/// A decoder's injection source, or `off` for no cross-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Injection(pub Option<Tap>);

impl FromStr for Injection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "off" {
            Ok(Self(None))
        } else {
            s.parse().map(|t| Self(Some(t)))
        }
    }
}

impl fmt::Display for Injection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(t) => t.fmt(f),
            None => f.write_str("off"),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| config_err!("{key}: cannot parse {value:?}: {e}"))
}

macro_rules! run_config {
    ($( $(#[doc = $doc:literal])+ $key:ident : $ty:ty = $default:expr, )+) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $( $(#[doc = $doc])+ pub $key: $ty, )+
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $key: $default, )+ }
            }
        }

        impl RunConfig {
            /// Every key with its one-line description, in echo order.
            pub const KEYS: &'static [(&'static str, &'static str)] =
                &[ $( (stringify!($key), concat!($($doc),+)), )+ ];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($key) => self.$key = parse_value(key, value)?, )+
                    _ => return Err(config_err!("unknown key {key:?}")),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $( stringify!($key) => Some(self.$key.to_string()), )+
                    _ => None,
                }
            }
        }
    };
}

run_config! {
    /// Master seed for initialization, masking and shuffling.
    seed: u64 = 0,
    /// `synth` or a directory of PPM/PGM files with optional labels.csv.
    dataset: String = "synth".into(),
    /// Number of synthetic images.
    synth_count: usize = 400,
    /// Number of synthetic classes (1 to 5).
    synth_classes: usize = 5,
    /// Per-pixel Gaussian noise of synthetic images.
    synth_noise: f64 = 0.05,
    /// Seed of the synthetic images and of the train/test split.
    data_seed: u64 = 0,
    /// Fraction of images used for training; the rest is held out.
    train_split: f64 = 0.6,
    /// Square image side in pixels.
    image_size: usize = 16,
    /// Image channels.
    channels: usize = 3,
    /// Patch side in pixels.
    patch: usize = 4,
    /// Encoder width.
    enc_dim: usize = 32,
    /// Encoder blocks.
    enc_depth: usize = 2,
    /// Encoder attention heads.
    enc_heads: usize = 4,
    /// Pixel regressor width.
    reg_dim: usize = 32,
    /// Pixel regressor blocks.
    reg_depth: usize = 2,
    /// Pixel regressor attention heads.
    reg_heads: usize = 4,
    /// Feature predictor blocks (width follows the encoder).
    pred_depth: usize = 2,
    /// Feature predictor attention heads.
    pred_heads: usize = 4,
    /// MLP hidden width as a multiple of the block width.
    mlp_ratio: usize = 4,
    /// Encoder level injected into the pixel regressor: low, mid, high or off.
    reg_tap: Injection = Injection(Some(Tap::Low)),
    /// Encoder level injected into the feature predictor: low, mid, high or off.
    pred_tap: Injection = Injection(Some(Tap::High)),
    /// Normalize decoder queries before cross-attention.
    xattn_prenorm: bool = true,
    /// Add an output projection after cross-attention.
    xattn_out_proj: bool = false,
    /// Inject the normalized encoder output as the high-level feature.
    normed_high_tap: bool = false,
    /// Pretraining epochs.
    epochs: usize = 300,
    /// Pretraining batch size.
    batch_size: usize = 32,
    /// Base learning rate, scaled by batch_size / 256.
    blr: f64 = 1.5e-2,
    /// Linear warmup length in epochs.
    warmup_epochs: f64 = 10.0,
    /// AdamW first-moment decay.
    beta1: f64 = 0.9,
    /// AdamW second-moment decay.
    beta2: f64 = 0.95,
    /// AdamW decoupled weight decay.
    weight_decay: f64 = 0.05,
    /// Global gradient-norm cap; 0 disables clipping.
    clip_grad: f64 = 0.0,
    /// Weight of the feature prediction loss.
    lambda: f64 = 1.0,
    /// Loss terms: both, pixel or feature.
    targets: TargetKind = TargetKind::Both,
    /// Masking strategy: random or block.
    mask: MaskStrategy = MaskStrategy::Random,
    /// Fraction of patches masked, in [0, 1).
    mask_ratio: f64 = 0.75,
    /// Smallest block area in patches.
    block_min: usize = 16,
    /// Largest block area in patches.
    block_max: usize = 60,
    /// Smallest block aspect ratio; the largest is its reciprocal.
    block_min_aspect: f64 = 0.3,
    /// Loss weight of masked patches strictly inside a block; 1 disables.
    center_weight: f64 = 1.0,
    /// Momentum at epoch 0.
    momentum_start: f64 = 0.999,
    /// Momentum reached at the end of the first ramp.
    momentum_mid: f64 = 0.9999,
    /// Length of the first momentum ramp in epochs.
    momentum_ramp_epochs: f64 = 100.0,
    /// Momentum after the second ramp; 0 disables the second ramp.
    momentum_end: f64 = 0.0,
    /// Epoch at which the second ramp ends.
    momentum_end_epoch: f64 = 400.0,
    /// Share of patches fed to the momentum encoder, in (0, 1].
    ema_fraction: f64 = 1.0,
    /// What a partial momentum feed contains: image or masked.
    ema_mode: FractionMode = FractionMode::Image,
    /// Pretraining checkpoint cadence in epochs; 0 keeps only the final one.
    checkpoint_every: usize = 10,
    /// Reconstruction gallery size.
    gallery: usize = 4,
    /// Checkpoint consumed by finetune and probe.
    checkpoint: String = String::new(),
    /// Checkpoint of the same command to resume from.
    resume: String = String::new(),
    /// Fine-tuning epochs.
    ft_epochs: usize = 40,
    /// Fine-tuning batch size.
    ft_batch_size: usize = 32,
    /// Fine-tuning base learning rate, scaled by ft_batch_size / 256.
    ft_blr: f64 = 0.1,
    /// Fine-tuning warmup in epochs.
    ft_warmup_epochs: f64 = 2.0,
    /// Fine-tuning weight decay.
    ft_weight_decay: f64 = 0.05,
    /// Fine-tuning second-moment decay.
    ft_beta2: f64 = 0.999,
    /// Per-layer learning-rate decay; 1 disables.
    layer_decay: f64 = 1.0,
    /// Pad-and-crop plus horizontal flip during fine-tuning.
    augment: bool = false,
    /// Fine-tuning checkpoint cadence in epochs; 0 keeps only the final one.
    ft_checkpoint_every: usize = 10,
    /// Linear probe epochs.
    probe_epochs: usize = 100,
    /// Linear probe batch size.
    probe_batch_size: usize = 64,
    /// Linear probe learning rate.
    probe_lr: f64 = 0.01,
    /// Linear probe weight decay.
    probe_weight_decay: f64 = 0.0,
    /// Masks drawn by mask-viz per strategy.
    viz_samples: usize = 200,
    /// Wall-clock limit in seconds for each ablation grid.
    budget_seconds: f64 = 900.0,
}

/// Keys that fix the network's parameter shapes.
pub const SHAPE_KEYS: &[&str] = &[
    "image_size",
    "channels",
    "patch",
    "enc_dim",
    "enc_depth",
    "enc_heads",
    "reg_dim",
    "reg_depth",
    "reg_heads",
    "pred_depth",
    "pred_heads",
    "mlp_ratio",
    "reg_tap",
    "pred_tap",
    "xattn_prenorm",
    "xattn_out_proj",
];

/// Parses `key = value` lines; returns `(key, value, line number)`.
pub fn parse_assignments(text: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out: Vec<(String, String, usize)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| config_err!("line {}: expected key = value, got {line:?}", i + 1))?;
        let (k, v) = (k.trim(), v.trim());
        if let Some((_, _, first)) = out.iter().find(|(key, _, _)| key == k) {
            return Err(config_err!("line {}: {k:?} already set on line {first}", i + 1));
        }
        out.push((k.to_string(), v.to_string(), i + 1));
    }
    Ok(out)
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v, line) in parse_assignments(text)? {
            cfg.set(&k, &v).map_err(|e| config_err!("line {line}: {e}"))?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| config_err!("{}: {e}", path.display()))
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<'a>(&mut self, overrides: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| config_err!("override {o:?} is not key=value"))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// The fully resolved configuration, one `key=value` per line.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, _) in Self::KEYS {
            out.push_str(k);
            out.push('=');
            out.push_str(&self.get(k).expect("listed key"));
            out.push('\n');
        }
        out
    }

    /// Shape-relevant keys whose values differ from `other`.
    pub fn shape_differences(&self, other: &Self) -> Vec<String> {
        SHAPE_KEYS
            .iter()
            .filter_map(|k| {
                let (a, b) = (self.get(k)?, other.get(k)?);
                (a != b).then(|| format!("{k}: {b} in checkpoint, {a} in this run"))
            })
            .collect()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            image_h: self.image_size,
            image_w: self.image_size,
            channels: self.channels,
            patch: self.patch,
            enc_dim: self.enc_dim,
            enc_depth: self.enc_depth,
            enc_heads: self.enc_heads,
            reg_dim: self.reg_dim,
            reg_depth: self.reg_depth,
            reg_heads: self.reg_heads,
            pred_depth: self.pred_depth,
            pred_heads: self.pred_heads,
            mlp_ratio: self.mlp_ratio,
            reg_tap: self.reg_tap.0,
            pred_tap: self.pred_tap.0,
            xattn_prenorm: self.xattn_prenorm,
            xattn_out_proj: self.xattn_out_proj,
            normed_high_tap: self.normed_high_tap,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            blr: self.blr,
            warmup_epochs: self.warmup_epochs,
            adam: AdamConfig {
                beta1: self.beta1,
                beta2: self.beta2,
                weight_decay: self.weight_decay,
                ..AdamConfig::default()
            },
            clip_grad: (self.clip_grad > 0.0).then_some(self.clip_grad),
            lambda: self.lambda,
            targets: self.targets,
            mask: self.mask,
            mask_ratio: self.mask_ratio,
            block: BlockMaskConfig {
                min_block: self.block_min,
                max_block: self.block_max,
                min_aspect: self.block_min_aspect,
            },
            center_weight: self.center_weight,
            momentum: MomentumSchedule {
                start: self.momentum_start,
                mid: self.momentum_mid,
                ramp1_epochs: self.momentum_ramp_epochs,
                second_ramp: (self.momentum_end > 0.0).then_some((self.momentum_end, self.momentum_end_epoch)),
            },
            ema_fraction: self.ema_fraction,
            ema_mode: self.ema_mode,
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            epochs: self.ft_epochs,
            batch_size: self.ft_batch_size,
            blr: self.ft_blr,
            warmup_epochs: self.ft_warmup_epochs,
            adam: AdamConfig {
                beta1: self.beta1,
                beta2: self.ft_beta2,
                weight_decay: self.ft_weight_decay,
                ..AdamConfig::default()
            },
            layer_decay: self.layer_decay,
            augment: self.augment,
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            epochs: self.probe_epochs,
            batch_size: self.probe_batch_size,
            lr: self.probe_lr,
            weight_decay: self.probe_weight_decay,
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            size: self.image_size,
            channels: self.channels,
            classes: self.synth_classes,
            count: self.synth_count,
            noise: self.synth_noise,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.pretrain_config().validate()?;
        self.finetune_config().validate()?;
        if !(self.train_split > 0.0 && self.train_split <= 1.0) {
            return Err(config_err!("train_split {} outside (0, 1]", self.train_split));
        }
        if self.probe_batch_size == 0 {
            return Err(config_err!("probe_batch_size must be positive"));
        }
        if !(self.budget_seconds > 0.0) {
            return Err(config_err!("budget_seconds must be positive"));
        }
        Ok(())
    }
}
