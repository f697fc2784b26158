//! Declarative model/experiment configuration, the ablation registry, and
//! seed handling.
//!
//! Config files are TOML with two tables, `[model]` and `[train]`, so that
//! ablation variants diff cleanly. Unknown keys are rejected. The
//! `DESAMBA_SEED` environment variable overrides the file seed (CI hook).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flag order used everywhere a variant is rendered: TE CE FP ME De C S.
pub const FLAG_NAMES: [&str; 7] = ["TE", "CE", "FP", "ME", "De", "C", "S"];

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of aligned MRI sequences per case (2 or 3).
    pub num_sequences: usize,
    pub num_classes: usize,
    /// Model input crop in voxels: depth, height, width.
    pub input_shape: [usize; 3],
    /// Blocks per backbone stage.
    pub stage_depths: [usize; 4],
    /// Channels per backbone stage.
    pub stage_widths: [usize; 4],
    pub enable_frequency_path: bool,
    pub enable_mamba_encoder: bool,
    pub enable_cnn_encoder: bool,
    pub enable_tabular_encoder: bool,
    pub enable_decouple: bool,
    pub enable_cross_loss: bool,
    pub enable_self_loss: bool,
    /// Weight of the self-reconstruction loss term.
    pub loss_alpha: f64,
    /// Weight of the cross-reconstruction loss term.
    pub loss_beta: f64,
    pub seed: u64,
    /// Dimension of the fused per-sequence feature f_i.
    pub fused_dim: usize,
    /// Dimension of the unique/shared decoupled features (defaults to
    /// fused_dim / 2 when zero).
    pub decoupled_dim: usize,
    /// Tabular embedding dimension.
    pub tabular_dim: usize,
    pub head_hidden: usize,
    pub head_dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_sequences: 3,
            num_classes: 6,
            input_shape: [16, 64, 64],
            stage_depths: [3, 4, 6, 3],
            stage_widths: [32, 64, 128, 256],
            enable_frequency_path: true,
            enable_mamba_encoder: true,
            enable_cnn_encoder: true,
            enable_tabular_encoder: true,
            enable_decouple: true,
            enable_cross_loss: true,
            enable_self_loss: true,
            loss_alpha: 0.5,
            loss_beta: 0.5,
            seed: 42,
            fused_dim: 256,
            decoupled_dim: 0,
            tabular_dim: 32,
            head_hidden: 128,
            head_dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, msg: String| Err(Error::Validation(format!("{field}: {msg}")));
        if !(self.num_sequences == 2 || self.num_sequences == 3) {
            return err("num_sequences", format!("must be 2 or 3, got {}", self.num_sequences));
        }
        if self.num_classes < 2 {
            return err("num_classes", format!("must be >= 2, got {}", self.num_classes));
        }
        if self.stage_depths.iter().any(|&d| d < 1) {
            return err("stage_depths", format!("all entries must be >= 1, got {:?}", self.stage_depths));
        }
        if self.stage_widths.iter().any(|&w| w < 1) {
            return err("stage_widths", format!("all entries must be >= 1, got {:?}", self.stage_widths));
        }
        if self.input_shape.iter().any(|&d| d < 2) {
            return err("input_shape", format!("spatial dims must be >= 2, got {:?}", self.input_shape));
        }
        if !self.enable_cnn_encoder && !self.enable_mamba_encoder {
            return err(
                "enable_cnn_encoder/enable_mamba_encoder",
                "at least one encoder branch must be enabled".into(),
            );
        }
        if (self.enable_cross_loss || self.enable_self_loss) && !self.enable_decouple {
            return err(
                "enable_cross_loss/enable_self_loss",
                "reconstruction losses require enable_decouple".into(),
            );
        }
        if !(0.0..=1.0).contains(&self.loss_alpha) {
            return err("loss_alpha", format!("must be in [0, 1], got {}", self.loss_alpha));
        }
        if !(0.0..=1.0).contains(&self.loss_beta) {
            return err("loss_beta", format!("must be in [0, 1], got {}", self.loss_beta));
        }
        if self.fused_dim < 2 {
            return err("fused_dim", format!("must be >= 2, got {}", self.fused_dim));
        }
        if !(0.0..1.0).contains(&self.head_dropout) {
            return err("head_dropout", format!("must be in [0, 1), got {}", self.head_dropout));
        }
        Ok(())
    }

    /// Effective unique/shared feature dimension.
    pub fn decoupled_dim(&self) -> usize {
        if self.decoupled_dim > 0 {
            self.decoupled_dim
        } else {
            (self.fused_dim / 2).max(1)
        }
    }

    /// Flags in TE CE FP ME De C S order.
    pub fn flags(&self) -> [bool; 7] {
        [
            self.enable_tabular_encoder,
            self.enable_cnn_encoder,
            self.enable_frequency_path,
            self.enable_mamba_encoder,
            self.enable_decouple,
            self.enable_cross_loss,
            self.enable_self_loss,
        ]
    }

    fn set_flags(&mut self, flags: [bool; 7]) {
        self.enable_tabular_encoder = flags[0];
        self.enable_cnn_encoder = flags[1];
        self.enable_frequency_path = flags[2];
        self.enable_mamba_encoder = flags[3];
        self.enable_decouple = flags[4];
        self.enable_cross_loss = flags[5];
        self.enable_self_loss = flags[6];
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Final cosine learning rate as a fraction of `lr`.
    pub lr_min_frac: f64,
    /// Linear warmup epochs before the cosine decay.
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    /// Validate on the internal cohort every this many epochs.
    pub eval_every: usize,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 16,
            batch_size: 4,
            lr: 3e-3,
            lr_min_frac: 0.05,
            warmup_epochs: 0,
            weight_decay: 1e-4,
            eval_every: 2,
            augment: true,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse_experiment(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text)
        .map_err(|e| Error::Config(format!("config parse failure: {e}")))?;
    Ok(cfg)
}

fn apply_seed_override(cfg: &mut ModelConfig, var: Option<String>) -> Result<()> {
    if let Some(raw) = var {
        let seed: u64 = raw
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("DESAMBA_SEED is not a valid u64: {raw:?}")))?;
        cfg.seed = seed;
    }
    Ok(())
}

/// Load and validate the full experiment config (model + training).
pub fn load_experiment(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = parse_experiment(&text)?;
    apply_seed_override(&mut cfg.model, std::env::var("DESAMBA_SEED").ok())?;
    cfg.model.validate()?;
    Ok(cfg)
}

/// Load and validate just the model section of a config file.
pub fn load_config(path: &Path) -> Result<ModelConfig> {
    Ok(load_experiment(path)?.model)
}

/// The ten ablation variants, in report order, with TE CE FP ME De C S flags.
pub const ABLATION_ROWS: [(&str, [bool; 7]); 10] = [
    ("CNV2", [false, true, false, false, false, false, false]),
    ("SAMNet", [false, true, true, false, false, false, false]),
    ("MO", [false, false, false, true, false, false, false]),
    ("DeSN", [false, true, true, false, true, true, true]),
    ("DeMO", [false, false, false, true, true, true, true]),
    ("Samba", [false, true, true, true, false, false, false]),
    ("w/TF", [true, true, true, true, false, false, false]),
    ("w/De(C)", [true, true, true, true, true, true, false]),
    ("w/De(S)", [true, true, true, true, true, false, true]),
    ("DeSamba", [true, true, true, true, true, true, true]),
];

/// Named map from ablation row to full model config, sharing everything but
/// the component flags with the base config.
pub struct AblationRegistry {
    base: ModelConfig,
}

impl AblationRegistry {
    pub fn new(base: ModelConfig) -> Result<Self> {
        base.validate()?;
        Ok(AblationRegistry { base })
    }

    pub fn names() -> Vec<&'static str> {
        ABLATION_ROWS.iter().map(|(n, _)| *n).collect()
    }

    /// Config for one named variant.
    pub fn config(&self, name: &str) -> Result<ModelConfig> {
        let (_, flags) = ABLATION_ROWS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| {
                Error::Validation(format!(
                    "unknown ablation variant {name:?}; valid names: {}",
                    Self::names().join(", ")
                ))
            })?;
        let mut cfg = self.base.clone();
        cfg.set_flags(*flags);
        cfg.validate()?;
        Ok(cfg)
    }

    /// All ten variants in report order.
    pub fn all(&self) -> Result<Vec<(String, ModelConfig)>> {
        ABLATION_ROWS
            .iter()
            .map(|(name, _)| Ok((name.to_string(), self.config(name)?)))
            .collect()
    }
}
