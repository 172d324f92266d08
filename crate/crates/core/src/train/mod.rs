//! Optimization, sampling, metrics and the ablation harness.

mod ablation;
mod data;
mod metrics;
mod optim;
mod sampling;
mod schedule;
mod stats;
mod trainer;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

pub use ablation::{run_ablation, AblationResult};
pub use data::{preprocess, Dataset, Sample};
pub use metrics::{evaluate, predict_dataset, EvalReport};
pub use optim::{adam_step, TrainState};
pub use sampling::{oversample_indices, Sampler};
pub use schedule::lr_at;
pub use stats::{mcnemar_test, McNemar};
pub use trainer::{train, StepLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub oversample: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.005,
            warmup_steps: 1000,
            total_steps: 20_000,
            batch_size: 32,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            oversample: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(config_err!("base_lr must be positive, got {}", self.base_lr));
        }
        if self.warmup_steps > self.total_steps {
            return Err(config_err!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps,
                self.total_steps
            ));
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return Err(config_err!("Adam betas must lie in [0, 1) and eps must be positive"));
        }
        Ok(())
    }
}
