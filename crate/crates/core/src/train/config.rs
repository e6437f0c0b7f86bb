use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scheduler {
    #[default]
    OneCycle,
    Cosine,
}

/// Optimization and schedule settings. Defaults reproduce the published
/// fine-tuning recipe for pretrained encoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub scheduler: Scheduler,
    pub warmup_steps: usize,
    pub max_epochs: usize,
    pub validate_every: usize,
    pub patience: usize,
    pub router_ce_weight: f64,
    pub mi_weight: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
    pub initial_temperature: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 20,
            learning_rate: 1e-5,
            scheduler: Scheduler::OneCycle,
            warmup_steps: 500,
            max_epochs: 10,
            validate_every: 5000,
            patience: 3,
            router_ce_weight: 1.0,
            mi_weight: 1.0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
            initial_temperature: 1.0 / 0.07,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.patience < 1 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.validate_every == 0 || self.max_epochs == 0 {
            return Err(Error::Config("validate_every and max_epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.initial_temperature > 0.0) {
            return Err(Error::Config("learning_rate and initial_temperature must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}
