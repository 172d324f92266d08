//! Parameterized layers shared by the backbone, the fusion module and the
//! encoder.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autograd::{Graph, Mode, Var};
use crate::error::Result;
use crate::tensor::{Real, Tensor};

/// A named model tensor. Non-trainable parameters are buffers such as
/// batch-norm running statistics: they are serialized but never optimized.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Real = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            value,
            trainable: true,
        }
    }

    pub fn buffer(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            value,
            trainable: false,
        }
    }
}

/// Anything that owns parameters.
pub trait Module<T: Real> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    /// Number of trainable scalars.
    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| {
            if p.trainable {
                n += p.value.numel();
            }
        });
        n
    }

    /// Overwrites buffers named in `updates`.
    fn apply_buffer_updates(&mut self, updates: Vec<(String, Tensor<T>)>) {
        if updates.is_empty() {
            return;
        }
        let mut updates: std::collections::HashMap<_, _> = updates.into_iter().collect();
        self.visit_mut(&mut |p| {
            if let Some(v) = updates.remove(&p.name) {
                p.value = v;
            }
        });
    }
}

impl<T: Real, M: Module<T>> Module<T> for Option<M> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        if let Some(m) = self {
            m.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        if let Some(m) = self {
            m.visit_mut(f);
        }
    }
}

impl<T: Real, M: Module<T>> Module<T> for Vec<M> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.iter().for_each(|m| m.visit(f));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.iter_mut().for_each(|m| m.visit_mut(f));
    }
}

pub(crate) fn uniform<T: Real>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::lit(dist.sample(rng))).collect()).expect("shape")
}

pub(crate) fn normal<T: Real>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::lit(dist.sample(rng))).collect()).expect("shape")
}

/// Bias-free convolution with a `[k, k, c_in, c_out]` kernel, He-uniform
/// initialized (bound `sqrt(6 / (k·k·c_in))`).
#[derive(Debug, Clone)]
pub struct Conv2d<T: Real = f32> {
    pub weight: Param<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn new(
        name: &str,
        k: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = (6.0 / (k * k * c_in) as f64).sqrt();
        Self {
            weight: Param::new(format!("{name}.weight"), uniform(&[k, k, c_in, c_out], bound, rng)),
            stride,
            padding,
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.conv2d(g.param(&self.weight), self.stride, self.padding)
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
    }
}

/// Batch normalization over every position except the channel axis.
#[derive(Debug, Clone)]
pub struct BatchNorm<T: Real = f32> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Real> BatchNorm<T> {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Tensor::ones([channels])),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros([channels])),
            running_mean: Param::buffer(format!("{name}.running_mean"), Tensor::zeros([channels])),
            running_var: Param::buffer(format!("{name}.running_var"), Tensor::ones([channels])),
            eps: Self::EPS,
            momentum: Self::MOMENTUM,
        }
    }

    /// Train mode normalizes with batch moments and queues a momentum
    /// update of the running statistics on `g`; eval mode is a pure
    /// function of the stored statistics.
    pub fn forward<'g>(&self, g: &'g Graph<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let train = g.mode() == Mode::Train;
        let (y, moments) = x.batch_norm(
            g.param(&self.gamma),
            g.param(&self.beta),
            (&self.running_mean.value, &self.running_var.value),
            T::lit(self.eps),
            train,
        )?;
        if let Some((mean, var)) = moments {
            let count = x.value().numel() / mean.len();
            let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
            let m = T::lit(self.momentum);
            let keep = T::one() - m;
            let blend = |old: &Tensor<T>, new: &[T], scale: f64| {
                let data = old
                    .data()
                    .iter()
                    .zip(new)
                    .map(|(&o, &n)| keep * o + m * n * T::lit(scale))
                    .collect();
                Tensor::new(old.shape().to_vec(), data).expect("same shape")
            };
            g.record_buffer(&self.running_mean.name, blend(&self.running_mean.value, &mean, 1.0));
            g.record_buffer(&self.running_var.name, blend(&self.running_var.value, &var, unbias));
        }
        Ok(y)
    }
}

impl<T: Real> Module<T> for BatchNorm<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

/// Affine map over the last axis, `x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear<T: Real = f32> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Real> Linear<T> {
    /// Uniform `±1/sqrt(in)` weights, zero bias.
    pub fn new(name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Self {
            weight: Param::new(format!("{name}.weight"), uniform(&[d_in, d_out], bound, rng)),
            bias: bias.then(|| Param::new(format!("{name}.bias"), Tensor::zeros([d_out]))),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.shape()[1]
    }

    /// Applies the map to every row of an arbitrary-rank input.
    pub fn forward<'g>(&self, g: &'g Graph<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let shape = x.shape();
        let rows = shape[..shape.len() - 1].iter().product::<usize>();
        let flat = if shape.len() == 2 { x } else { x.reshape(&[rows, shape[shape.len() - 1]])? };
        let mut y = flat.matmul(g.param(&self.weight))?;
        if let Some(b) = &self.bias {
            y = y.add(g.param(b))?;
        }
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out = shape;
            *out.last_mut().unwrap() = self.d_out();
            y.reshape(&out)
        }
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm<T: Real = f32> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub eps: f64,
}

impl<T: Real> LayerNorm<T> {
    pub const EPS: f64 = 1e-5;

    pub fn new(name: &str, dim: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Tensor::ones([dim])),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros([dim])),
            eps: Self::EPS,
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.layer_norm(g.param(&self.gamma), g.param(&self.beta), T::lit(self.eps))
    }
}

impl<T: Real> Module<T> for LayerNorm<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}
