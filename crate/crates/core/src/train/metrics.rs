use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Result};
use crate::model::Vtff;
use crate::tensor::Real;

use super::Dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall_accuracy: f64,
    /// Mean recall over the classes that occur in the labels.
    pub mean_class_accuracy: f64,
    /// `confusion_matrix[true][predicted]`.
    pub confusion_matrix: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn from_predictions(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<Self> {
        if preds.len() != labels.len() {
            return Err(contract_err!("{} predictions for {} labels", preds.len(), labels.len()));
        }
        if labels.is_empty() {
            return Err(contract_err!("cannot evaluate an empty dataset"));
        }
        let mut cm = vec![vec![0usize; n_classes]; n_classes];
        for (&p, &y) in preds.iter().zip(labels) {
            if p >= n_classes || y >= n_classes {
                return Err(contract_err!("class index out of range for {n_classes} classes"));
            }
            cm[y][p] += 1;
        }
        let correct: usize = (0..n_classes).map(|c| cm[c][c]).sum();
        let recalls: Vec<f64> = cm
            .iter()
            .enumerate()
            .filter_map(|(c, row)| {
                let total: usize = row.iter().sum();
                (total > 0).then(|| row[c] as f64 / total as f64)
            })
            .collect();
        Ok(Self {
            overall_accuracy: correct as f64 / labels.len() as f64,
            mean_class_accuracy: recalls.iter().sum::<f64>() / recalls.len() as f64,
            confusion_matrix: cm,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.confusion_matrix.iter().flatten().sum()
    }
}

/// Eval-mode predictions for every sample, in dataset order.
pub fn predict_dataset<T: Real>(model: &Vtff<T>, data: &Dataset<T>, batch_size: usize) -> Result<Vec<usize>> {
    let all: Vec<usize> = (0..data.len()).collect();
    let mut preds = Vec::with_capacity(data.len());
    for chunk in all.chunks(batch_size.max(1)) {
        let (rgb, lbp, _) = data.batch(chunk)?;
        preds.extend(model.predict(&rgb, &lbp)?);
    }
    Ok(preds)
}

pub fn evaluate<T: Real>(model: &Vtff<T>, data: &Dataset<T>, batch_size: usize) -> Result<EvalReport> {
    let preds = predict_dataset(model, data, batch_size)?;
    EvalReport::from_predictions(&preds, &data.labels(), model.config().n_classes())
}
