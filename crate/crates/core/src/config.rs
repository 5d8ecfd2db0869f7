//! Architecture and training configuration.
//!
//! A run is described by a single JSON document ([`RunConfig`]) with a
//! `schema_version` field and three sections: `model`, `training` and `data`.
//! Unknown keys are rejected at parse time. [`MiaConfig::validate`] checks the
//! architectural invariants and caches the derived sizes in [`ValidConfig`].

use std::ops::Deref;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ConfigError, MiaError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiaConfig {
    pub num_blocks: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    /// (N_h, N_w); must equal image_size / patch_size on both axes.
    pub token_grid: [usize; 2],
    pub use_class_token: bool,
    pub mlp_ratio: f64,
    /// E'; `None` selects E/4.
    #[serde(default)]
    pub controller_hidden: Option<usize>,
    /// E''; `None` selects E/4.
    #[serde(default)]
    pub head_feature_dim: Option<usize>,
    pub patch_size: usize,
    pub image_size: usize,
    #[serde(default = "default_channels")]
    pub in_channels: usize,
    pub num_classes: usize,
    pub gumbel_tau_start: f64,
    pub gumbel_tau_end: f64,
    pub target_flops_ratio: f64,
    pub alpha_magnitude: f64,
    pub beta: f64,
    pub inherit_fraction: f64,
    pub seed: u64,
}

fn default_channels() -> usize {
    3
}

impl MiaConfig {
    /// The desk-scale reference model: 4 blocks, 4 heads of width 16, 32x32
    /// inputs split into 8x8 patches, 10 classes.
    pub fn tiny_vit() -> Self {
        Self {
            num_blocks: 4,
            num_heads: 4,
            head_dim: 16,
            token_grid: [4, 4],
            use_class_token: true,
            mlp_ratio: 2.0,
            controller_hidden: None,
            head_feature_dim: None,
            patch_size: 8,
            image_size: 32,
            in_channels: 3,
            num_classes: 10,
            gumbel_tau_start: 5.0,
            gumbel_tau_end: 0.5,
            target_flops_ratio: 0.7,
            alpha_magnitude: 0.1,
            beta: 0.5,
            inherit_fraction: 0.75,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<ValidConfig> {
        fn positive(field: &'static str, v: usize) -> std::result::Result<(), ConfigError> {
            if v == 0 {
                Err(ConfigError::NonPositive { field })
            } else {
                Ok(())
            }
        }
        let c = self;
        positive("num_blocks", c.num_blocks)?;
        positive("num_heads", c.num_heads)?;
        positive("head_dim", c.head_dim)?;
        positive("patch_size", c.patch_size)?;
        positive("image_size", c.image_size)?;
        positive("in_channels", c.in_channels)?;
        positive("num_classes", c.num_classes)?;
        positive("token_grid", c.token_grid[0].min(c.token_grid[1]))?;
        if !(c.mlp_ratio > 0.0 && c.mlp_ratio.is_finite()) {
            return Err(ConfigError::NonPositiveReal { field: "mlp_ratio" }.into());
        }
        for (field, v) in [
            ("gumbel_tau_start", c.gumbel_tau_start),
            ("gumbel_tau_end", c.gumbel_tau_end),
            ("alpha_magnitude", c.alpha_magnitude),
            ("beta", c.beta),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ConfigError::NonPositiveReal { field }.into());
            }
        }
        if c.image_size % c.patch_size != 0 {
            return Err(ConfigError::NotDivisible {
                field: "image_size",
                by: "patch_size",
            }
            .into());
        }
        let side = c.image_size / c.patch_size;
        if c.token_grid != [side, side] {
            return Err(ConfigError::GridMismatch {
                expected: side,
                got: c.token_grid,
            }
            .into());
        }
        if !(c.target_flops_ratio > 0.0 && c.target_flops_ratio <= 1.0) {
            return Err(ConfigError::OutOfRange {
                field: "target_flops_ratio",
                value: c.target_flops_ratio,
                range: "(0, 1]",
            }
            .into());
        }
        if !(0.0..=1.0).contains(&c.inherit_fraction) {
            return Err(ConfigError::OutOfRange {
                field: "inherit_fraction",
                value: c.inherit_fraction,
                range: "[0, 1]",
            }
            .into());
        }
        let quarter = |field: &'static str, explicit: Option<usize>| match explicit {
            Some(0) => Err(ConfigError::NonPositive { field }),
            Some(v) => Ok(v),
            None if c.head_dim % 4 == 0 => Ok(c.head_dim / 4),
            None => Err(ConfigError::NotDivisible {
                field: "head_dim",
                by: "4 (default E' = E/4)",
            }),
        };
        let e_prime = quarter("controller_hidden", c.controller_hidden)?;
        let e_dprime = quarter("head_feature_dim", c.head_feature_dim)?;
        let group = c.mlp_ratio * c.head_dim as f64;
        if (group - group.round()).abs() > 1e-9 {
            return Err(ConfigError::NotDivisible {
                field: "mlp_ratio * head_dim",
                by: "1 (per-head MLP group width must be integral)",
            }
            .into());
        }
        let mlp_group = group.round() as usize;
        let embed = c.num_heads * c.head_dim;
        let num_tokens = side * side;
        Ok(ValidConfig {
            cfg: c.clone(),
            num_tokens,
            grid: (side, side),
            embed_dim: embed,
            mlp_group,
            mlp_hidden: mlp_group * c.num_heads,
            e_prime,
            e_dprime,
            ctrl_width: c.num_heads * e_prime,
            seq_len: num_tokens + usize::from(c.use_class_token),
            patch_dim: c.in_channels * c.patch_size * c.patch_size,
            image_len: c.in_channels * c.image_size * c.image_size,
        })
    }
}

/// A configuration whose invariants hold, plus derived sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidConfig {
    cfg: MiaConfig,
    /// N = N_h * N_w spatial tokens.
    pub num_tokens: usize,
    pub grid: (usize, usize),
    /// H * E.
    pub embed_dim: usize,
    /// Per-head MLP hidden group width r * E.
    pub mlp_group: usize,
    pub mlp_hidden: usize,
    pub e_prime: usize,
    pub e_dprime: usize,
    /// H * E'.
    pub ctrl_width: usize,
    /// Rows per sample in the token matrix (N plus the class token).
    pub seq_len: usize,
    pub patch_dim: usize,
    pub image_len: usize,
}

impl Deref for ValidConfig {
    type Target = MiaConfig;

    fn deref(&self) -> &MiaConfig {
        &self.cfg
    }
}

impl ValidConfig {
    pub fn raw(&self) -> &MiaConfig {
        &self.cfg
    }

    /// Row of spatial token `n` within a sample's token matrix.
    pub fn token_row(&self, n: usize) -> usize {
        n + usize::from(self.use_class_token)
    }
}

/// Epoch counts, optimizer settings and batching for the three stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Fixed chunk size for data-parallel gradient evaluation; results do
    /// not depend on the thread count.
    pub micro_batch: usize,
    pub backbone_epochs: usize,
    pub backbone_lr: f64,
    pub backbone_warmup_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch_size: usize,
    pub pretrain_max_epochs: usize,
    pub pretrain_probe_samples: usize,
    pub cotrain_epochs: usize,
    pub cotrain_backbone_lr: f64,
    pub cotrain_controller_lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub rl_frozen_epochs: usize,
    pub rl_total_epochs: usize,
    pub rl_backbone_lr: f64,
    pub rl_controller_lr: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            micro_batch: 16,
            backbone_epochs: 30,
            backbone_lr: 1e-3,
            backbone_warmup_epochs: 2,
            pretrain_lr: 1e-4,
            pretrain_batch_size: 32,
            pretrain_max_epochs: 200,
            pretrain_probe_samples: 256,
            cotrain_epochs: 60,
            cotrain_backbone_lr: 1e-5,
            cotrain_controller_lr: 1e-3,
            weight_decay: 0.01,
            grad_clip: 1.0,
            rl_frozen_epochs: 8,
            rl_total_epochs: 20,
            rl_backbone_lr: 1e-5,
            rl_controller_lr: 1e-3,
            value_coef: 0.5,
            entropy_coef: 0.01,
        }
    }
}

/// Where samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Built-in generator, materialized in memory.
    Synthetic { samples: usize, seed: u64 },
    /// Directory holding images plus `labels.csv` (`filename,label`).
    Directory { path: String },
    /// Packed record file written by `synth-data`.
    Packed { path: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub val_fraction: f64,
    /// Seed of the train/validation split, kept apart from the model seed so
    /// every stage of a pipeline sees the same partition.
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic {
                samples: 5000,
                seed: 7,
            },
            val_fraction: 0.1,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub model: MiaConfig,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            model: MiaConfig::tiny_vit(),
            training: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::SchemaVersion {
                expected: SCHEMA_VERSION,
                got: cfg.schema_version,
            }
            .into());
        }
        cfg.model.validate()?;
        if cfg.training.batch_size == 0 || cfg.training.micro_batch == 0 {
            return Err(ConfigError::NonPositive {
                field: "training.batch_size",
            }
            .into());
        }
        if !(0.0..1.0).contains(&cfg.data.val_fraction) {
            return Err(ConfigError::OutOfRange {
                field: "data.val_fraction",
                value: cfg.data.val_fraction,
                range: "[0, 1)",
            }
            .into());
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MiaError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

/// Hex SHA-256 of the model section alone; checkpoints record this.
pub fn model_hash(cfg: &MiaConfig) -> String {
    let canonical = serde_json::to_string(cfg).expect("config serializes");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}
