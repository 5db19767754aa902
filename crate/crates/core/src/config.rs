//! The complete run configuration.

use serde::{Deserialize, Serialize};

use crate::data::{AugmentConfig, NoiseConfig};
use crate::error::{usage_err, Result};
use crate::loss::LossConfig;
use crate::model::ModelConfig;
use crate::optim::OptimConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub augment: AugmentConfig,
    pub noise: NoiseConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { augment: AugmentConfig::default(), noise: NoiseConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    /// Evaluate every this many epochs when an eval split is given; 0 never.
    pub eval_every: u64,
    /// Write a checkpoint every this many epochs; 0 only at the end.
    pub checkpoint_every: u64,
    /// Stop once eval mean Dice reaches this value.
    pub target_dice: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 100, batch_size: 8, eval_every: 1, checkpoint_every: 10, target_dice: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.encoder.validate()?;
        let d = &self.model.decoder;
        if d.classes < 2 || d.classes > 256 {
            return Err(usage_err!("classes must be in 2..=256"));
        }
        if d.heads == 0 || self.model.encoder.dim % d.heads != 0 {
            return Err(usage_err!("decoder heads must divide dim"));
        }
        if !(self.loss.lambda_w_start > 0.0 && self.loss.lambda_w_start <= 1.0) {
            return Err(usage_err!("lambda_w_start must be in (0, 1]"));
        }
        if self.train.batch_size == 0 {
            return Err(usage_err!("batch_size must be positive"));
        }
        Ok(())
    }
}
