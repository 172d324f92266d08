use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Result};
use crate::model::{ModelConfig, Variant, Vtff};

use super::{evaluate, train, Dataset, EvalReport, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub reports: Vec<EvalReport>,
    pub mean_accuracy: f64,
    /// Sample standard deviation; zero for a single seed.
    pub std_accuracy: f64,
    pub mean_class_accuracy: f64,
}

/// Trains `variant` once per seed (model init and sampling both use the
/// seed) and evaluates on `test`.
pub fn run_ablation(
    variant: Variant,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train_data: &Dataset<f32>,
    test_data: &Dataset<f32>,
    seeds: &[u64],
) -> Result<AblationResult> {
    if seeds.is_empty() {
        return Err(contract_err!("ablation needs at least one seed"));
    }
    let cfg = model_cfg.with_variant(variant);
    let mut reports = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut model = Vtff::<f32>::new(&cfg, seed)?;
        let tc = TrainConfig { seed, ..train_cfg.clone() };
        train(&mut model, train_data, &tc, |_| {})?;
        reports.push(evaluate(&model, test_data, tc.batch_size)?);
    }
    let acc: Vec<f64> = reports.iter().map(|r| r.overall_accuracy).collect();
    let (mean_accuracy, std_accuracy) = mean_std(&acc);
    let (mean_class_accuracy, _) = mean_std(&reports.iter().map(|r| r.mean_class_accuracy).collect::<Vec<_>>());
    Ok(AblationResult {
        variant,
        seeds: seeds.to_vec(),
        reports,
        mean_accuracy,
        std_accuracy,
        mean_class_accuracy,
    })
}

pub(crate) fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
