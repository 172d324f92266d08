//! Configurable residual CNN mapping `H×W×C_in` images to
//! `H/R × W/R × C_f` feature maps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{config_err, contract_err, Result};
use crate::nn::{BatchNorm, Conv2d, Module, Param};
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Output channels of each stage; the last entry is `C_f`.
    pub stage_channels: Vec<usize>,
    /// Downsampling stride of each stage; their product is `R`.
    pub stage_strides: Vec<usize>,
    pub blocks_per_stage: usize,
}

impl Default for BackboneConfig {
    /// Five stages, `R = 32`, `C_f = 512`, two blocks per stage.
    fn default() -> Self {
        Self {
            stage_channels: vec![64, 64, 128, 256, 512],
            stage_strides: vec![2, 2, 2, 2, 2],
            blocks_per_stage: 2,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() {
            return Err(config_err!("backbone needs at least one stage"));
        }
        if self.stage_channels.len() != self.stage_strides.len() {
            return Err(config_err!(
                "{} stage channel counts but {} strides",
                self.stage_channels.len(),
                self.stage_strides.len()
            ));
        }
        if self.stage_channels.contains(&0) || self.stage_strides.contains(&0) {
            return Err(config_err!("stage channels and strides must be positive"));
        }
        if self.blocks_per_stage == 0 {
            return Err(config_err!("blocks_per_stage must be positive"));
        }
        Ok(())
    }

    /// Total downsampling rate `R`.
    pub fn downsampling(&self) -> usize {
        self.stage_strides.iter().product()
    }

    /// Output channels `C_f`.
    pub fn out_channels(&self) -> usize {
        *self.stage_channels.last().expect("validated config")
    }

    /// Closed-form trainable parameter count for `in_channels` inputs.
    pub fn parameter_count(&self, in_channels: usize) -> usize {
        let mut total = 0;
        let mut c_in = in_channels;
        for (&c_out, &stride) in self.stage_channels.iter().zip(&self.stage_strides) {
            for b in 0..self.blocks_per_stage {
                let s = if b == 0 { stride } else { 1 };
                // two 3×3 convs, each followed by BN (gamma + beta)
                total += 9 * c_in * c_out + 2 * c_out + 9 * c_out * c_out + 2 * c_out;
                if s > 1 || c_in != c_out {
                    total += c_in * c_out + 2 * c_out;
                }
                c_in = c_out;
            }
        }
        total
    }
}

/// `relu(bn(conv(relu(bn(conv(x))))) + shortcut(x))`.
#[derive(Debug, Clone)]
pub struct ResidualBlock<T: Real = f32> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm<T>,
    /// 1×1 projection, present when the block changes stride or width.
    pub shortcut: Option<(Conv2d<T>, BatchNorm<T>)>,
}

impl<T: Real> ResidualBlock<T> {
    pub fn new(name: &str, c_in: usize, c_out: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let conv1 = Conv2d::new(&format!("{name}.conv1"), 3, c_in, c_out, stride, 1, rng);
        let conv2 = Conv2d::new(&format!("{name}.conv2"), 3, c_out, c_out, 1, 1, rng);
        let shortcut = (stride > 1 || c_in != c_out).then(|| {
            (
                Conv2d::new(&format!("{name}.shortcut"), 1, c_in, c_out, stride, 0, rng),
                BatchNorm::new(&format!("{name}.shortcut_bn"), c_out),
            )
        });
        Self {
            conv1,
            bn1: BatchNorm::new(&format!("{name}.bn1"), c_out),
            conv2,
            bn2: BatchNorm::new(&format!("{name}.bn2"), c_out),
            shortcut,
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let h = self.bn1.forward(g, self.conv1.forward(g, x)?)?.relu()?;
        let h = self.bn2.forward(g, self.conv2.forward(g, h)?)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => bn.forward(g, conv.forward(g, x)?)?,
            None => x,
        };
        h.add(skip)?.relu()
    }
}

impl<T: Real> Module<T> for ResidualBlock<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.conv1.visit(f);
        self.bn1.visit(f);
        self.conv2.visit(f);
        self.bn2.visit(f);
        if let Some((c, b)) = &self.shortcut {
            c.visit(f);
            b.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv1.visit_mut(f);
        self.bn1.visit_mut(f);
        self.conv2.visit_mut(f);
        self.bn2.visit_mut(f);
        if let Some((c, b)) = &mut self.shortcut {
            c.visit_mut(f);
            b.visit_mut(f);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Backbone<T: Real = f32> {
    cfg: BackboneConfig,
    in_channels: usize,
    pub blocks: Vec<ResidualBlock<T>>,
}

impl<T: Real> Backbone<T> {
    /// A three-channel backbone named `backbone`, initialized from `seed`.
    pub fn build(cfg: &BackboneConfig, seed: u64) -> Result<Self> {
        Self::with_rng("backbone", cfg, 3, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn with_rng(name: &str, cfg: &BackboneConfig, in_channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        if in_channels == 0 {
            return Err(config_err!("backbone input needs at least one channel"));
        }
        let mut blocks = Vec::new();
        let mut c_in = in_channels;
        for (s, (&c_out, &stride)) in cfg.stage_channels.iter().zip(&cfg.stage_strides).enumerate() {
            for b in 0..cfg.blocks_per_stage {
                let stride = if b == 0 { stride } else { 1 };
                blocks.push(ResidualBlock::new(&format!("{name}.stage{s}.block{b}"), c_in, c_out, stride, rng));
                c_in = c_out;
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            in_channels,
            blocks,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// Maps `[N,H,W,C_in]` (or `[H,W,C_in]`) to `[N,H/R,W/R,C_f]`.
    pub fn forward<'g>(&self, g: &'g Graph<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let shape = x.shape();
        let r = self.cfg.downsampling();
        let (h, w, c) = match shape.as_slice() {
            [h, w, c] | [_, h, w, c] => (*h, *w, *c),
            _ => return Err(contract_err!("backbone input must be HWC or NHWC, got {shape:?}")),
        };
        if h % r != 0 || w % r != 0 {
            return Err(contract_err!("input {h}×{w} is not divisible by the downsampling rate {r}"));
        }
        if c != self.in_channels {
            return Err(contract_err!("backbone expects {} channels, got {c}", self.in_channels));
        }
        self.blocks.iter().try_fold(x, |x, block| block.forward(g, x))
    }
}

impl<T: Real> Module<T> for Backbone<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.blocks.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.blocks.visit_mut(f);
    }
}
