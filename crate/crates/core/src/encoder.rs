//! Visual-word tokenization, the pre-norm Transformer encoder, the
//! classification head and attention rollout.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{config_err, contract_err, dim_err, Result};
use crate::nn::{normal, LayerNorm, Linear, Module, Param};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Encoder layers `N_l`.
    pub n_layers: usize,
    /// Attention heads `N_h`.
    pub n_heads: usize,
    /// Token width `C_p`.
    pub embed_dim: usize,
    pub mlp_hidden: usize,
    /// Expression classes `M`.
    pub n_classes: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 8,
            embed_dim: 768,
            mlp_hidden: 3072,
            n_classes: 7,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.embed_dim == 0 || self.mlp_hidden == 0 || self.n_classes == 0 {
            return Err(config_err!("encoder heads, width, MLP width and classes must be positive"));
        }
        if !self.embed_dim.is_multiple_of(self.n_heads) {
            return Err(config_err!(
                "embed_dim {} is not divisible by n_heads {}",
                self.embed_dim,
                self.n_heads
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    /// Trainable scalars in the encoder layers plus the final layer norm:
    /// `N_l·(4C² + 2Ch + 9C + h) + 2C` for `C = C_p`, `h = mlp_hidden`.
    pub fn parameter_count(&self) -> usize {
        let (c, h) = (self.embed_dim, self.mlp_hidden);
        self.n_layers * (4 * c * c + 2 * c * h + 9 * c + h) + 2 * c
    }
}

/// Projection of fused features into `C_p`-wide tokens plus the `[cls]`
/// token and the learnable positional table.
#[derive(Debug, Clone)]
pub struct Tokenizer<T: Real = f32> {
    pub proj: Linear<T>,
    pub cls: Param<T>,
    /// `[H_d·W_d + 1, C_p]`, row 0 belongs to `[cls]`.
    pub pos: Param<T>,
}

impl<T: Real> Tokenizer<T> {
    /// `cls` and `pos` are drawn from `N(0, 0.02²)`.
    pub fn new(name: &str, c_f: usize, c_p: usize, n_positions: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            proj: Linear::new(&format!("{name}.proj"), c_f, c_p, true, rng),
            cls: Param::new(format!("{name}.cls"), normal(&[c_p], 0.02, rng)),
            pos: Param::new(format!("{name}.pos_embed"), normal(&[n_positions + 1, c_p], 0.02, rng)),
        }
    }

    /// `[N,H_d,W_d,C_f]` → `[N, H_d·W_d + 1, C_p]`; a rank-3 input gives a
    /// rank-2 sequence. Spatial positions are flattened row-major.
    pub fn forward<'g>(&self, g: &'g Graph<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let shape = x.shape();
        let (n, hd, wd, c_f) = match shape.as_slice() {
            [h, w, c] => (1, *h, *w, *c),
            [n, h, w, c] => (*n, *h, *w, *c),
            _ => return Err(dim_err!("tokenize expects HWC or NHWC features, got {shape:?}")),
        };
        let c_p = self.proj.d_out();
        if c_f != self.proj.d_in() {
            return Err(dim_err!("features have {c_f} channels, projection expects {}", self.proj.d_in()));
        }
        let t = hd * wd + 1;
        if self.pos.value.shape() != [t, c_p] {
            return Err(dim_err!(
                "{hd}×{wd} grid needs {t} positions, table is {:?}",
                self.pos.value.shape()
            ));
        }
        let words = self.proj.forward(g, x.reshape(&[n, hd * wd, c_f])?)?;
        let cls = g
            .constant(Tensor::zeros([n, 1, c_p]))
            .add(g.param(&self.cls).reshape(&[1, 1, c_p])?)?;
        let z = Var::concat(&[cls, words], 1)?.add(g.param(&self.pos))?;
        if shape.len() == 3 {
            z.reshape(&[t, c_p])
        } else {
            Ok(z)
        }
    }
}

impl<T: Real> Module<T> for Tokenizer<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.proj.visit(f);
        f(&self.cls);
        f(&self.pos);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.proj.visit_mut(f);
        f(&mut self.cls);
        f(&mut self.pos);
    }
}

/// Multi-head self-attention with biased Q/K/V/O projections.
#[derive(Debug, Clone)]
pub struct SelfAttention<T: Real = f32> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    /// `W^O`, `C_p × C_p`.
    pub o: Linear<T>,
    pub n_heads: usize,
}

impl<T: Real> SelfAttention<T> {
    pub fn new(name: &str, c_p: usize, n_heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            q: Linear::new(&format!("{name}.q"), c_p, c_p, true, rng),
            k: Linear::new(&format!("{name}.k"), c_p, c_p, true, rng),
            v: Linear::new(&format!("{name}.v"), c_p, c_p, true, rng),
            o: Linear::new(&format!("{name}.o"), c_p, c_p, true, rng),
            n_heads,
        }
    }

    /// Returns the attended sequence and the attention probabilities,
    /// `[N, N_h, T, T]` (`[N_h, T, T]` for a rank-2 input).
    pub fn forward<'g>(&self, g: &'g Graph<T>, z: Var<'g, T>) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let shape = z.shape();
        let (n, t, c) = match shape.as_slice() {
            [t, c] => (1, *t, *c),
            [n, t, c] => (*n, *t, *c),
            _ => return Err(dim_err!("attention expects [T,C] or [N,T,C], got {shape:?}")),
        };
        let h = self.n_heads;
        if c % h != 0 {
            return Err(contract_err!("width {c} is not divisible by {h} heads"));
        }
        let d = c / h;
        let z = z.reshape(&[n, t, c])?;
        let split = |x: Var<'g, T>| -> Result<Var<'g, T>> {
            x.reshape(&[n, t, h, d])?.permute(&[0, 2, 1, 3])?.reshape(&[n * h, t, d])
        };
        let q = split(self.q.forward(g, z)?)?;
        let k = split(self.k.forward(g, z)?)?;
        let v = split(self.v.forward(g, z)?)?;
        let attn = q
            .matmul_t(k)?
            .scale(T::one() / T::lit(d as f64).sqrt())?
            .softmax(2)?;
        let ctx = attn
            .matmul(v)?
            .reshape(&[n, h, t, d])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[n, t, c])?;
        let out = self.o.forward(g, ctx)?;
        if shape.len() == 2 {
            Ok((out.reshape(&[t, c])?, attn.reshape(&[h, t, t])?))
        } else {
            Ok((out, attn.reshape(&[n, h, t, t])?))
        }
    }
}

impl<T: Real> Module<T> for SelfAttention<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.q.visit(f);
        self.k.visit(f);
        self.v.visit(f);
        self.o.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.q.visit_mut(f);
        self.k.visit_mut(f);
        self.v.visit_mut(f);
        self.o.visit_mut(f);
    }
}

/// `ẑ = MHSA(LN(z)) + z`, `z' = MLP(LN(ẑ)) + ẑ`.
#[derive(Debug, Clone)]
pub struct EncoderLayer<T: Real = f32> {
    pub ln1: LayerNorm<T>,
    pub attn: SelfAttention<T>,
    pub ln2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Real> EncoderLayer<T> {
    pub fn new(name: &str, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.embed_dim;
        Self {
            ln1: LayerNorm::new(&format!("{name}.ln1"), c),
            attn: SelfAttention::new(&format!("{name}.attn"), c, cfg.n_heads, rng),
            ln2: LayerNorm::new(&format!("{name}.ln2"), c),
            fc1: Linear::new(&format!("{name}.mlp.fc1"), c, cfg.mlp_hidden, true, rng),
            fc2: Linear::new(&format!("{name}.mlp.fc2"), cfg.mlp_hidden, c, true, rng),
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph<T>, z: Var<'g, T>) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let (a, maps) = self.attn.forward(g, self.ln1.forward(g, z)?)?;
        let z_hat = a.add(z)?;
        let m = self.fc2.forward(g, self.fc1.forward(g, self.ln2.forward(g, z_hat)?)?.gelu()?)?;
        Ok((m.add(z_hat)?, maps))
    }
}

impl<T: Real> Module<T> for EncoderLayer<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.ln1.visit(f);
        self.attn.visit(f);
        self.ln2.visit(f);
        self.fc1.visit(f);
        self.fc2.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.ln1.visit_mut(f);
        self.attn.visit_mut(f);
        self.ln2.visit_mut(f);
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}

/// Attention probabilities of every layer, each `[N, N_h, T, T]`.
#[derive(Debug, Clone, Default)]
pub struct AttentionMaps<T: Real = f32> {
    pub layers: Vec<Tensor<T>>,
}

impl<T: Real> AttentionMaps<T> {
    /// Number of `T×T` maps per sample (`N_l·N_h`).
    pub fn map_count(&self) -> usize {
        self.layers.iter().map(|l| l.shape()[l.rank() - 3]).sum()
    }

    /// Per-layer `[N_h, T, T]` maps of one batch item.
    pub fn sample(&self, index: usize) -> Result<Vec<Tensor<T>>> {
        self.layers
            .iter()
            .map(|l| {
                let s = l.shape();
                match s {
                    [_, _, _] if index == 0 => Ok(l.clone()),
                    [n, h, t, _] if index < *n => {
                        let size = h * t * t;
                        Tensor::new([*h, *t, *t], l.data()[index * size..(index + 1) * size].to_vec())
                    }
                    _ => Err(contract_err!("no sample {index} in attention maps of shape {s:?}")),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Encoder<T: Real = f32> {
    pub layers: Vec<EncoderLayer<T>>,
    /// Applied to the final `[cls]` state before the head.
    pub norm: LayerNorm<T>,
}

impl<T: Real> Encoder<T> {
    pub fn new(name: &str, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            layers: (0..cfg.n_layers)
                .map(|i| EncoderLayer::new(&format!("{name}.layers.{i}"), cfg, rng))
                .collect(),
            norm: LayerNorm::new(&format!("{name}.norm"), cfg.embed_dim),
        })
    }

    /// Runs every layer in order, collecting their attention maps.
    pub fn encode<'g>(&self, g: &'g Graph<T>, z0: Var<'g, T>) -> Result<(Var<'g, T>, Vec<Var<'g, T>>)> {
        let mut z = z0;
        let mut maps = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, m) = layer.forward(g, z)?;
            z = next;
            maps.push(m);
        }
        Ok((z, maps))
    }

    /// Logits `θᵀ·LN(z[cls])`, `[N, M]` (or `[M]` for a rank-2 sequence).
    pub fn classify<'g>(&self, g: &'g Graph<T>, z: Var<'g, T>, theta: &Param<T>) -> Result<Var<'g, T>> {
        let shape = z.shape();
        let cls = match shape.as_slice() {
            [_, c] => z.narrow(0, 0, 1)?.reshape(&[1, *c])?,
            [n, _, c] => z.narrow(1, 0, 1)?.reshape(&[*n, *c])?,
            _ => return Err(dim_err!("classify expects a token sequence, got {shape:?}")),
        };
        let logits = self.norm.forward(g, cls)?.matmul(g.param(theta))?;
        if shape.len() == 2 {
            let m = logits.shape()[1];
            logits.reshape(&[m])
        } else {
            Ok(logits)
        }
    }
}

impl<T: Real> Module<T> for Encoder<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.layers.visit(f);
        self.norm.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.layers.visit_mut(f);
        self.norm.visit_mut(f);
    }
}

/// Joint attention `Â_L ⋯ Â_2 · Â_1` over all layers as a `[T, T]` matrix.
///
/// Each layer's head-averaged map `A` becomes `A + I` with rows
/// renormalized, which accounts for the residual paths.
pub fn rollout_matrix<T: Real>(layers: &[Tensor<T>]) -> Result<Tensor<f64>> {
    let first = layers.first().ok_or_else(|| contract_err!("rollout needs at least one layer"))?;
    let t = *first.shape().last().unwrap();
    let mut joint: Option<Vec<f64>> = None;
    for layer in layers {
        let (heads, rows, cols) = match layer.shape() {
            [h, r, c] => (*h, *r, *c),
            [r, c] => (1, *r, *c),
            s => return Err(dim_err!("expected [heads, T, T] maps, got {s:?}")),
        };
        if rows != t || cols != t {
            return Err(dim_err!("layer map {:?} does not match {t} tokens", layer.shape()));
        }
        let mut a = vec![0.0f64; t * t];
        for hmap in layer.data().chunks_exact(t * t) {
            for (acc, v) in a.iter_mut().zip(hmap) {
                *acc += v.to_f64().unwrap_or(0.0) / heads as f64;
            }
        }
        for i in 0..t {
            a[i * t + i] += 1.0;
            let row = &mut a[i * t..(i + 1) * t];
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= total);
        }
        joint = Some(match joint {
            None => a,
            Some(prev) => {
                let mut out = vec![0.0; t * t];
                for i in 0..t {
                    for k in 0..t {
                        let aik = a[i * t + k];
                        for j in 0..t {
                            out[i * t + j] += aik * prev[k * t + j];
                        }
                    }
                }
                out
            }
        });
    }
    Tensor::new([t, t], joint.expect("at least one layer"))
}

/// The `[cls]` row of [`rollout_matrix`] over the spatial tokens, reshaped
/// to the `H_d×W_d` grid and min-max scaled to `[0, 1]`. A flat row maps
/// to all zeros.
pub fn attention_rollout<T: Real>(layers: &[Tensor<T>], grid: (usize, usize)) -> Result<Tensor<T>> {
    let joint = rollout_matrix(layers)?;
    let (hd, wd) = grid;
    let t = joint.shape()[0];
    if t != hd * wd + 1 {
        return Err(dim_err!("{t} tokens do not match a {hd}×{wd} grid plus [cls]"));
    }
    let cls = &joint.data()[1..t];
    let lo = cls.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = cls.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let data = cls
        .iter()
        .map(|&v| if span > 0.0 { T::lit((v - lo) / span) } else { T::zero() })
        .collect();
    Tensor::new([hd, wd], data)
}
