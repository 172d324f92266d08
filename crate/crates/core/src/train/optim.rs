use std::collections::HashMap;

use crate::autograd::Grads;
use crate::error::{contract_err, Result};
use crate::nn::Module;
use crate::tensor::{Real, Tensor};

use super::TrainConfig;

/// Adam moments keyed by parameter name, plus the step counter and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T: Real = f32> {
    pub step: u64,
    pub seed: u64,
    pub m: HashMap<String, Tensor<T>>,
    pub v: HashMap<String, Tensor<T>>,
}

impl<T: Real> TrainState<T> {
    /// Zero moments for every trainable parameter of `model`.
    pub fn new(model: &impl Module<T>, seed: u64) -> Self {
        let mut m = HashMap::new();
        model.visit(&mut |p| {
            if p.trainable {
                m.insert(p.name.clone(), Tensor::zeros(p.value.shape().to_vec()));
            }
        });
        Self {
            step: 0,
            seed,
            v: m.clone(),
            m,
        }
    }
}

/// One bias-corrected Adam update of every trainable parameter.
/// Parameters absent from `grads` see a zero gradient.
pub fn adam_step<T: Real>(
    model: &mut impl Module<T>,
    grads: &Grads<T>,
    state: &mut TrainState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let mut err = None;
    model.visit(&mut |p| {
        if !p.trainable || err.is_some() {
            return;
        }
        let want = p.value.shape();
        let shapes = [
            grads.param(&p.name).map(Tensor::shape),
            state.m.get(&p.name).map(Tensor::shape),
            state.v.get(&p.name).map(Tensor::shape),
        ];
        if shapes[1].is_none() || shapes[2].is_none() {
            err = Some(contract_err!("no optimizer state for parameter {}", p.name));
        } else if let Some(bad) = shapes.iter().flatten().find(|s| **s != want) {
            err = Some(contract_err!("parameter {} is {want:?} but its update is {bad:?}", p.name));
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let step_size = T::lit(lr / (1.0 - b1.powi(t)));
    let v_corr = T::lit(1.0 - b2.powi(t));
    let (b1, b2, eps) = (T::lit(b1), T::lit(b2), T::lit(cfg.adam_eps));
    let one = T::one();
    model.visit_mut(&mut |p| {
        if !p.trainable {
            return;
        }
        let m = state.m.get_mut(&p.name).expect("checked above");
        let v = state.v.get_mut(&p.name).expect("checked above");
        let g = grads.param(&p.name);
        for i in 0..p.value.numel() {
            let gi = g.map_or(T::zero(), |g| g.data()[i]);
            let mi = b1 * m.data()[i] + (one - b1) * gi;
            let vi = b2 * v.data()[i] + (one - b2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let update = step_size * mi / ((vi / v_corr).sqrt() + eps);
            p.value.data_mut()[i] = p.value.data()[i] - update;
        }
    });
    Ok(())
}
