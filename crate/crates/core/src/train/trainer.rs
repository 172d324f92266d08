use crate::autograd::{Graph, Mode};
use crate::error::{contract_err, Result};
use crate::model::Vtff;
use crate::nn::Module;
use crate::tensor::Real;

use super::{adam_step, lr_at, Dataset, Sampler, TrainConfig, TrainState};

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Runs `cfg.total_steps` Adam steps on mini-batches drawn from `data`.
/// Step `t` (1-based) uses `lr_at(t)`.
pub fn train<T: Real>(
    model: &mut Vtff<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainState<T>> {
    cfg.validate()?;
    if data.n_classes() > model.config().n_classes() {
        return Err(contract_err!(
            "dataset has {} classes but the model predicts {}",
            data.n_classes(),
            model.config().n_classes()
        ));
    }
    let mut sampler = Sampler::new(&data.labels(), cfg.oversample, cfg.seed)?;
    let mut state = TrainState::new(&*model, cfg.seed);
    for step in 1..=cfg.total_steps {
        let lr = lr_at(step, cfg);
        let idx = sampler.next_batch(cfg.batch_size)?;
        let (rgb, lbp, labels) = data.batch(&idx)?;
        let g = Graph::new(Mode::Train);
        let loss = model.loss(&g, &rgb, &lbp, &labels)?;
        let grads = g.backward(loss)?;
        let buffers = g.take_buffer_updates();
        adam_step(model, &grads, &mut state, lr, cfg)?;
        model.apply_buffer_updates(buffers);
        on_step(&StepLog {
            step,
            lr,
            loss: loss.value().item().to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(state)
}
