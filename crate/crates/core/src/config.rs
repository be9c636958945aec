//! Architecture and training hyperparameters, presets, validation, and the
//! flat `key = value` run-configuration format.

use std::fmt::Write as _;
use std::ops::Deref;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embedding::Vocab;
use crate::error::{Error, Result};

/// What occupies the FPN or decoder fusion slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotVariant {
    /// Slot omitted (Table-III style "off" rows).
    None,
    /// Shared self-attention over the concatenated sequence.
    Shared,
    /// Vision queries attend text keys/values; text passes through.
    Cross,
    /// Parallel vision-to-text and text-to-vision cross-attention.
    Bidir,
}

impl SlotVariant {
    pub const ALL: [SlotVariant; 4] = [SlotVariant::Shared, SlotVariant::Cross, SlotVariant::Bidir, SlotVariant::None];

    pub fn name(self) -> &'static str {
        match self {
            SlotVariant::None => "none",
            SlotVariant::Shared => "shared",
            SlotVariant::Cross => "cross",
            SlotVariant::Bidir => "bidir",
        }
    }
}

impl FromStr for SlotVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "none" | "off" => Ok(SlotVariant::None),
            "shared" | "on" => Ok(SlotVariant::Shared),
            "cross" => Ok(SlotVariant::Cross),
            "bidir" | "bi_direction" => Ok(SlotVariant::Bidir),
            other => Err(format!("unknown fusion variant `{other}`")),
        }
    }
}

impl std::fmt::Display for SlotVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub mlp_ratio: usize,
    pub encoder_heads: usize,
    /// 1-based encoder layer indices whose outputs feed the FPN.
    pub tap_stages: Vec<usize>,
    pub fpn_dim: usize,
    pub fpn_heads: usize,
    pub decoder_heads: usize,
    pub upsample_steps: usize,
    pub mask_threshold: f64,
    pub vocab_size: usize,
    pub max_text_len: usize,
    /// Mask padded text keys in every attention.
    pub text_mask: bool,
    /// Bias on the final FPN fusion projection.
    pub fpn_bias: bool,
    pub fpn_fusion: SlotVariant,
    pub decoder_fusion: SlotVariant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub stochastic_depth_prob: f64,
    pub grad_clip_norm: f64,
    pub lambda_bce: f64,
    pub lambda_dice: f64,
    pub seed: u64,
    /// Fraction of total steps spent in linear warmup (0 disables).
    pub warmup_fraction: f64,
    pub hflip_prob: f64,
    /// Hard cap on optimizer steps; 0 means the epoch count decides.
    pub max_steps: usize,
    /// Evaluate on the validation split every this many epochs.
    pub eval_every: usize,
}

/// The base configuration of the reference architecture (ViT-B sized encoder).
pub fn paper_base_config() -> ModelConfig {
    ModelConfig {
        image_height: 480,
        image_width: 480,
        patch_size: 16,
        embed_dim: 768,
        encoder_layers: 12,
        mlp_ratio: 4,
        encoder_heads: 12,
        tap_stages: vec![3, 6, 9, 12],
        fpn_dim: 512,
        fpn_heads: 8,
        decoder_heads: 8,
        upsample_steps: 2,
        mask_threshold: 0.35,
        vocab_size: Vocab::synthetic().len(),
        max_text_len: 32,
        text_mask: true,
        fpn_bias: true,
        fpn_fusion: SlotVariant::Shared,
        decoder_fusion: SlotVariant::Shared,
    }
}

/// Desk-scale preset: 64x64 images, 8x8 patches, 4 layers of width 128.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        image_height: 64,
        image_width: 64,
        patch_size: 8,
        embed_dim: 128,
        encoder_layers: 4,
        encoder_heads: 2,
        tap_stages: vec![2, 4],
        fpn_dim: 64,
        // Full-resolution maps: at 32x32 the target itself round-trips
        // to only ~0.86 IoU on the synthetic scenes.
        upsample_steps: 3,
        ..paper_base_config()
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            weight_decay: 5e-4,
            epochs: 35,
            batch_size: 14,
            stochastic_depth_prob: 0.1,
            grad_clip_norm: 1.0,
            lambda_bce: 2.0,
            lambda_dice: 0.5,
            seed: 0,
            warmup_fraction: 0.03,
            hflip_prob: 0.5,
            max_steps: 0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    /// Recipe used with the toy preset: from-scratch training needs a larger
    /// step size than fine-tuning, and batch 4 gives it enough steps in 35
    /// epochs of 256 samples.
    pub fn toy() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 4,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("stochastic_depth_prob", self.stochastic_depth_prob),
            ("warmup_fraction", self.warmup_fraction),
            ("hflip_prob", self.hflip_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr = {} must be positive", self.lr)));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::Config("grad_clip_norm must be positive".into()));
        }
        if self.weight_decay < 0.0 || self.lambda_bce < 0.0 || self.lambda_dice < 0.0 {
            return Err(Error::Config("weight decay and loss weights must be nonnegative".into()));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be positive".into()));
        }
        Ok(())
    }
}

/// A [`ModelConfig`] whose invariants hold, with derived sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidatedConfig {
    config: ModelConfig,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Number of image patches `n`.
    pub num_patches: usize,
    /// `n + 1`: patches plus the visual class token.
    pub visual_len: usize,
    pub map_h: usize,
    pub map_w: usize,
}

impl Deref for ValidatedConfig {
    type Target = ModelConfig;
    fn deref(&self) -> &ModelConfig {
        &self.config
    }
}

impl ValidatedConfig {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn into_inner(self) -> ModelConfig {
        self.config
    }

    /// Shared sequence length `n + m + 3` for text of `m` tokens.
    pub fn seq_len(&self, m: usize) -> usize {
        self.num_patches + m + 3
    }

    pub fn num_taps(&self) -> usize {
        self.config.tap_stages.len()
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<ValidatedConfig> {
        let c = self;
        if c.patch_size == 0 || c.image_height % c.patch_size != 0 || c.image_width % c.patch_size != 0 {
            return Err(Error::Divisibility {
                height: c.image_height,
                width: c.image_width,
                patch: c.patch_size,
            });
        }
        if c.image_height == 0 || c.image_width == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        let stage_err = |reason| Error::Stage {
            stages: c.tap_stages.clone(),
            layers: c.encoder_layers,
            reason,
        };
        if c.tap_stages.is_empty() {
            return Err(stage_err("at least one tap stage is required"));
        }
        if c.tap_stages.windows(2).any(|w| w[0] >= w[1]) {
            return Err(stage_err("tap stages must be strictly increasing"));
        }
        if c.tap_stages[0] < 1 || *c.tap_stages.last().unwrap() != c.encoder_layers {
            return Err(stage_err("tap stages must lie in [1, L] and end at L"));
        }
        let divides = |what: &str, dim: usize, heads: usize| -> Result<()> {
            if heads == 0 || dim % heads != 0 {
                Err(Error::Config(format!("{what}: width {dim} not divisible by {heads} heads")))
            } else {
                Ok(())
            }
        };
        divides("encoder", c.embed_dim, c.encoder_heads)?;
        divides("fpn", c.fpn_dim, c.fpn_heads)?;
        divides("decoder", c.fpn_dim, c.decoder_heads)?;
        if !(c.mask_threshold > 0.0 && c.mask_threshold < 1.0) {
            return Err(Error::Config(format!("mask_threshold {} outside (0, 1)", c.mask_threshold)));
        }
        if c.upsample_steps < 1 {
            return Err(Error::Config("upsample_steps must be at least 1".into()));
        }
        if c.mlp_ratio == 0 || c.embed_dim == 0 || c.fpn_dim == 0 {
            return Err(Error::Config("widths must be positive".into()));
        }
        if c.vocab_size < 2 {
            return Err(Error::Config("vocabulary must hold <pad> and <unk>".into()));
        }
        let grid_h = c.image_height / c.patch_size;
        let grid_w = c.image_width / c.patch_size;
        let scale = 1usize << c.upsample_steps;
        Ok(ValidatedConfig {
            config: c.clone(),
            grid_h,
            grid_w,
            num_patches: grid_h * grid_w,
            visual_len: grid_h * grid_w + 1,
            map_h: grid_h * scale,
            map_w: grid_w * scale,
        })
    }
}

/// Model plus training settings; the unit stored in run-configuration files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub const PRESETS: [&str; 2] = ["toy", "base"];

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(RunConfig {
                model: toy_config(),
                train: TrainConfig::toy(),
            }),
            "base" => Ok(RunConfig {
                model: paper_base_config(),
                train: TrainConfig::default(),
            }),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected toy or base)"))),
        }
    }

    /// Every key accepted by [`RunConfig::set`], in file order.
    pub const KEYS: [&'static str; 35] = [
        "image_height",
        "image_width",
        "patch_size",
        "embed_dim",
        "encoder_layers",
        "mlp_ratio",
        "encoder_heads",
        "tap_stages",
        "fpn_dim",
        "fpn_heads",
        "decoder_heads",
        "upsample_steps",
        "mask_threshold",
        "vocab_size",
        "max_text_len",
        "text_mask",
        "fpn_bias",
        "fpn_fusion",
        "decoder_fusion",
        "lr",
        "beta1",
        "beta2",
        "adam_eps",
        "weight_decay",
        "epochs",
        "batch_size",
        "stochastic_depth_prob",
        "grad_clip_norm",
        "lambda_bce",
        "lambda_dice",
        "seed",
        "warmup_fraction",
        "hflip_prob",
        "max_steps",
        "eval_every",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
            value.trim().parse().map_err(|_| Error::BadValue {
                key: key.to_string(),
                value: value.to_string(),
            })
        }
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "image_height" => m.image_height = parse(key, value)?,
            "image_width" => m.image_width = parse(key, value)?,
            "patch_size" => m.patch_size = parse(key, value)?,
            "embed_dim" => m.embed_dim = parse(key, value)?,
            "encoder_layers" => m.encoder_layers = parse(key, value)?,
            "mlp_ratio" => m.mlp_ratio = parse(key, value)?,
            "encoder_heads" => m.encoder_heads = parse(key, value)?,
            "tap_stages" => {
                m.tap_stages = value
                    .split(',')
                    .map(|s| parse(key, s))
                    .collect::<Result<Vec<usize>>>()?
            }
            "fpn_dim" => m.fpn_dim = parse(key, value)?,
            "fpn_heads" => m.fpn_heads = parse(key, value)?,
            "decoder_heads" => m.decoder_heads = parse(key, value)?,
            "upsample_steps" => m.upsample_steps = parse(key, value)?,
            "mask_threshold" => m.mask_threshold = parse(key, value)?,
            "vocab_size" => m.vocab_size = parse(key, value)?,
            "max_text_len" => m.max_text_len = parse(key, value)?,
            "text_mask" => m.text_mask = parse(key, value)?,
            "fpn_bias" => m.fpn_bias = parse_switch(key, value)?,
            "fpn_fusion" => m.fpn_fusion = parse(key, value)?,
            "decoder_fusion" => m.decoder_fusion = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "adam_eps" => t.adam_eps = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "stochastic_depth_prob" => t.stochastic_depth_prob = parse(key, value)?,
            "grad_clip_norm" => t.grad_clip_norm = parse(key, value)?,
            "lambda_bce" => t.lambda_bce = parse(key, value)?,
            "lambda_dice" => t.lambda_dice = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "warmup_fraction" => t.warmup_fraction = parse(key, value)?,
            "hflip_prob" => t.hflip_prob = parse(key, value)?,
            "max_steps" => t.max_steps = parse(key, value)?,
            "eval_every" => t.eval_every = parse(key, value)?,
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies a configuration document on top of `self`.
    pub fn apply_file_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`", lineno + 1)));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn from_file_text(base: RunConfig, text: &str) -> Result<Self> {
        let mut cfg = base;
        cfg.apply_file_text(text)?;
        Ok(cfg)
    }

    /// Renders every field; parsing the result reproduces `self` exactly.
    pub fn to_file_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let stages: Vec<String> = m.tap_stages.iter().map(|s| s.to_string()).collect();
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("image_height", m.image_height.to_string());
        put("image_width", m.image_width.to_string());
        put("patch_size", m.patch_size.to_string());
        put("embed_dim", m.embed_dim.to_string());
        put("encoder_layers", m.encoder_layers.to_string());
        put("mlp_ratio", m.mlp_ratio.to_string());
        put("encoder_heads", m.encoder_heads.to_string());
        put("tap_stages", stages.join(","));
        put("fpn_dim", m.fpn_dim.to_string());
        put("fpn_heads", m.fpn_heads.to_string());
        put("decoder_heads", m.decoder_heads.to_string());
        put("upsample_steps", m.upsample_steps.to_string());
        put("mask_threshold", format!("{:?}", m.mask_threshold));
        put("vocab_size", m.vocab_size.to_string());
        put("max_text_len", m.max_text_len.to_string());
        put("text_mask", m.text_mask.to_string());
        put("fpn_bias", m.fpn_bias.to_string());
        put("fpn_fusion", m.fpn_fusion.to_string());
        put("decoder_fusion", m.decoder_fusion.to_string());
        put("lr", format!("{:?}", t.lr));
        put("beta1", format!("{:?}", t.beta1));
        put("beta2", format!("{:?}", t.beta2));
        put("adam_eps", format!("{:?}", t.adam_eps));
        put("weight_decay", format!("{:?}", t.weight_decay));
        put("epochs", t.epochs.to_string());
        put("batch_size", t.batch_size.to_string());
        put("stochastic_depth_prob", format!("{:?}", t.stochastic_depth_prob));
        put("grad_clip_norm", format!("{:?}", t.grad_clip_norm));
        put("lambda_bce", format!("{:?}", t.lambda_bce));
        put("lambda_dice", format!("{:?}", t.lambda_dice));
        put("seed", t.seed.to_string());
        put("warmup_fraction", format!("{:?}", t.warmup_fraction));
        put("hflip_prob", format!("{:?}", t.hflip_prob));
        put("max_steps", t.max_steps.to_string());
        put("eval_every", t.eval_every.to_string());
        out
    }

    /// Key-wise comparison; returns the first key whose value differs.
    pub fn first_difference(&self, other: &RunConfig, model_only: bool) -> Option<String> {
        let ours = self.to_file_text();
        let theirs = other.to_file_text();
        let model_keys = 19;
        for (i, (a, b)) in ours.lines().zip(theirs.lines()).enumerate() {
            if model_only && i >= model_keys {
                break;
            }
            if a != b {
                return a.split_once(" = ").map(|(k, _)| k.to_string());
            }
        }
        None
    }
}

fn parse_switch(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "on" => Ok(true),
        "false" | "off" => Ok(false),
        _ => Err(Error::BadValue {
            key: key.to_string(),
            value: value.to_string(),
        }),
    }
}
