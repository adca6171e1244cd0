use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::codec::EncoderSpec;
use crate::error::{Error, Result};

/// Distortion weight per quality index 1..=8.
pub const LAMBDA_BY_QUALITY: [f64; 8] = [0.0018, 0.0035, 0.0067, 0.0130, 0.0250, 0.0483, 0.0932, 0.1800];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Analysis transform plus classifier head, cross-entropy only.
    PretrainCls,
    /// Rate, distortion and classification jointly.
    Joint,
    /// Joint objective starting from an existing hyperprior codec.
    FinetuneHyper,
}

/// Per-epoch learning-rate schedule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Cosine decay from `lr` at the first epoch to `final_fraction * lr` at the last.
    Cosine { final_fraction: f64 },
}

impl LrSchedule {
    /// Learning rate for `epoch` (1-based) of `epochs`.
    pub fn lr(&self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine { final_fraction } => {
                let t = if epochs > 1 { (epoch - 1) as f64 / (epochs - 1) as f64 } else { 0.0 };
                let lo = base * final_fraction;
                lo + 0.5 * (base - lo) * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// Procedurally generated ten-class texture and shape images.
    Synthetic {
        #[serde(default = "default_images")]
        images: usize,
        #[serde(default = "default_size")]
        size: usize,
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default)]
        seed: u64,
    },
    /// One sub-directory of PNG files per class, center-cropped to `size`.
    ImageDir {
        path: PathBuf,
        #[serde(default = "default_size")]
        size: usize,
    },
}

fn default_images() -> usize {
    500
}
fn default_size() -> usize {
    64
}
fn default_classes() -> usize {
    10
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic { images: default_images(), size: default_size(), classes: default_classes(), seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub batch: usize,
    /// Overrides the per-quality table when set.
    pub lambda_rd: Option<f64>,
    pub beta_cls: f64,
    pub quality: u8,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub validation_fraction: f64,
    pub encoder: EncoderSpec,
    pub grad_clip: f64,
    /// Where metrics and checkpoints go; nothing is written when unset.
    pub output_dir: Option<PathBuf>,
    /// Starting checkpoint; required for the joint and fine-tuning phases.
    pub init: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase: Phase::Joint,
            epochs: 20,
            lr: 1e-4,
            lr_schedule: LrSchedule::Constant,
            batch: 16,
            lambda_rd: None,
            beta_cls: 0.1,
            quality: 8,
            seed: 0,
            dataset: DatasetConfig::default(),
            validation_fraction: 0.2,
            encoder: EncoderSpec::toy(),
            grad_clip: 1.0,
            output_dir: None,
            init: None,
        }
    }
}

impl TrainConfig {
    pub fn lambda(&self) -> f64 {
        self.lambda_rd.unwrap_or_else(|| LAMBDA_BY_QUALITY[usize::from(self.quality.clamp(1, 8)) - 1])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if let LrSchedule::Cosine { final_fraction } = self.lr_schedule {
            if !(0.0..=1.0).contains(&final_fraction) {
                return bad("cosine final_fraction must be in [0, 1]");
            }
        }
        if self.batch == 0 {
            return bad("batch must be positive");
        }
        if !(1..=8).contains(&self.quality) {
            return bad("quality must be in 1..=8");
        }
        if self.phase != Phase::PretrainCls && !(self.lambda() > 0.0) {
            return bad("lambda_rd must be positive");
        }
        if !(self.beta_cls >= 0.0) {
            return bad("beta_cls must be nonnegative");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must be in [0, 1)");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        self.encoder.validate()
    }

    pub fn from_json_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
