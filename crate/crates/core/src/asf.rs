//! Attentional selective fusion of the LBP-stream and RGB-stream feature
//! maps.
//!
//! ```text
//! U      = W_L * X_lbp + W_C * X_rgb                      (1×1 convs)
//! G(U)   = σ(BN(conv2_G(δ(BN(conv1_G(AP(U)))))))           1×1×C_f
//! L(U)   = σ(BN(conv2_L(δ(BN(conv1_L(U))))))               H_d×W_d×1
//! GL     = G ⊕ L                                           broadcast add
//! X_fused = X_lbp ⊗ σ(GL) + X_rgb ⊗ σ(1 − GL)
//! ```
//!
//! The outer `σ` in the last line is applied to `GL` even though both of
//! its terms already end in a sigmoid, so the two branch weights do not sum
//! to one. [`Eq6Mode::Complementary`] swaps the RGB weight for `1 − σ(GL)`.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{config_err, contract_err, Result};
use crate::nn::{BatchNorm, Conv2d, Module, Param};
use crate::tensor::Real;

/// How the fused map weights the RGB stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Eq6Mode {
    /// `X_rgb ⊗ σ(1 − GL)`.
    #[default]
    Literal,
    /// `X_rgb ⊗ (1 − σ(GL))`.
    Complementary,
}

/// A 1×1 convolution followed by batch normalization.
#[derive(Debug, Clone)]
pub struct ConvBn<T: Real = f32> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm<T>,
}

impl<T: Real> ConvBn<T> {
    fn new(name: &str, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: Conv2d::new(&format!("{name}.conv"), 1, c_in, c_out, 1, 0, rng),
            bn: BatchNorm::new(&format!("{name}.bn"), c_out),
        }
    }

    fn forward<'g>(&self, g: &'g Graph<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        self.bn.forward(g, self.conv.forward(g, x)?)
    }
}

impl<T: Real> Module<T> for ConvBn<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.conv.visit(f);
        self.bn.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv.visit_mut(f);
        self.bn.visit_mut(f);
    }
}

/// All learnable state of the fusion module.
#[derive(Debug, Clone)]
pub struct Asf<T: Real = f32> {
    /// `W_L`, `C_f → C_f`.
    pub w_lbp: Conv2d<T>,
    /// `W_C`, `C_f → C_f`.
    pub w_rgb: Conv2d<T>,
    pub global1: ConvBn<T>,
    pub global2: ConvBn<T>,
    pub local1: ConvBn<T>,
    pub local2: ConvBn<T>,
    pub reduction: usize,
    pub eq6: Eq6Mode,
}

impl<T: Real> Asf<T> {
    pub fn new(name: &str, channels: usize, reduction: usize, eq6: Eq6Mode, rng: &mut ChaCha8Rng) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(config_err!("C_f = {channels} is not divisible by reduction ratio {reduction}"));
        }
        let hidden = channels / reduction;
        Ok(Self {
            w_lbp: Conv2d::new(&format!("{name}.w_lbp"), 1, channels, channels, 1, 0, rng),
            w_rgb: Conv2d::new(&format!("{name}.w_rgb"), 1, channels, channels, 1, 0, rng),
            global1: ConvBn::new(&format!("{name}.global1"), channels, hidden, rng),
            global2: ConvBn::new(&format!("{name}.global2"), hidden, channels, rng),
            local1: ConvBn::new(&format!("{name}.local1"), channels, hidden, rng),
            local2: ConvBn::new(&format!("{name}.local2"), hidden, 1, rng),
            reduction,
            eq6,
        })
    }

    pub fn channels(&self) -> usize {
        self.w_lbp.weight.value.shape()[2]
    }

    /// `U = W_L·X_lbp + W_C·X_rgb`.
    pub fn initial_integration<'g>(&self, g: &'g Graph<T>, x_lbp: Var<'g, T>, x_rgb: Var<'g, T>) -> Result<Var<'g, T>> {
        if x_lbp.shape() != x_rgb.shape() {
            return Err(contract_err!(
                "fusion inputs differ in shape: {:?} vs {:?}",
                x_lbp.shape(),
                x_rgb.shape()
            ));
        }
        self.w_lbp.forward(g, x_lbp)?.add(self.w_rgb.forward(g, x_rgb)?)
    }

    /// Channel attention `G(U)`, shape `[N,1,1,C_f]` (or `[1,1,C_f]`).
    pub fn global_context<'g>(&self, g: &'g Graph<T>, u: Var<'g, T>) -> Result<Var<'g, T>> {
        let rank = u.shape().len();
        let pooled = u.mean_axes(&[rank - 3, rank - 2])?;
        let h = self.global1.forward(g, pooled)?.relu()?;
        self.global2.forward(g, h)?.sigmoid()
    }

    /// Spatial attention `L(U)`, shape `[N,H_d,W_d,1]`.
    pub fn local_context<'g>(&self, g: &'g Graph<T>, u: Var<'g, T>) -> Result<Var<'g, T>> {
        let h = self.local1.forward(g, u)?.relu()?;
        self.local2.forward(g, h)?.sigmoid()
    }

    pub fn forward<'g>(&self, g: &'g Graph<T>, x_lbp: Var<'g, T>, x_rgb: Var<'g, T>) -> Result<Var<'g, T>> {
        let u = self.initial_integration(g, x_lbp, x_rgb)?;
        let gl = global_local_weights(self.global_context(g, u)?, self.local_context(g, u)?)?;
        fuse(x_lbp, x_rgb, gl, self.eq6)
    }
}

impl<T: Real> Module<T> for Asf<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.w_lbp.visit(f);
        self.w_rgb.visit(f);
        self.global1.visit(f);
        self.global2.visit(f);
        self.local1.visit(f);
        self.local2.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.w_lbp.visit_mut(f);
        self.w_rgb.visit_mut(f);
        self.global1.visit_mut(f);
        self.global2.visit_mut(f);
        self.local1.visit_mut(f);
        self.local2.visit_mut(f);
    }
}

/// `GL = G ⊕ L`: `[.., 1, 1, C]` plus `[.., H, W, 1]` gives `[.., H, W, C]`.
pub fn global_local_weights<'g, T: Real>(global: Var<'g, T>, local: Var<'g, T>) -> Result<Var<'g, T>> {
    global.add(local)
}

/// Mixes the two streams with weights derived from `gl`.
pub fn fuse<'g, T: Real>(x_lbp: Var<'g, T>, x_rgb: Var<'g, T>, gl: Var<'g, T>, mode: Eq6Mode) -> Result<Var<'g, T>> {
    if x_lbp.shape() != x_rgb.shape() || x_lbp.shape() != gl.shape() {
        return Err(contract_err!(
            "fuse shapes differ: lbp {:?}, rgb {:?}, weights {:?}",
            x_lbp.shape(),
            x_rgb.shape(),
            gl.shape()
        ));
    }
    let w_lbp = gl.sigmoid()?;
    let w_rgb = match mode {
        Eq6Mode::Literal => gl.rsub(T::one())?.sigmoid()?,
        Eq6Mode::Complementary => w_lbp.rsub(T::one())?,
    };
    x_lbp.mul(w_lbp)?.add(x_rgb.mul(w_rgb)?)
}
