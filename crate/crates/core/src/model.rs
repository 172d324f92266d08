//! The full two-stream network and the ablation variants built from it.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::asf::{Asf, Eq6Mode};
use crate::autograd::{Graph, Mode, Var};
use crate::backbone::{Backbone, BackboneConfig};
use crate::encoder::{AttentionMaps, Encoder, EncoderConfig, Tokenizer};
use crate::error::{config_err, dim_err, Error, Result};
use crate::nn::{uniform, Module, Param};
use crate::tensor::{argmax, Real, Tensor};

/// How the two streams are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    #[default]
    Asf,
    /// Elementwise sum of the two feature maps.
    Add,
    /// Channel concatenation of the two input images into one 6-channel
    /// backbone.
    Concat,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub backbone: BackboneConfig,
    pub encoder: EncoderConfig,
    /// Without the LBP stream only the RGB backbone runs and `fusion` is
    /// ignored.
    pub use_lbp: bool,
    pub fusion: Fusion,
    pub eq6: Eq6Mode,
    pub reduction_ratio: usize,
    /// Without the encoder, logits come from average-pooled fused features.
    pub use_encoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 224,
            backbone: BackboneConfig::default(),
            encoder: EncoderConfig::default(),
            use_lbp: true,
            fusion: Fusion::Asf,
            eq6: Eq6Mode::Literal,
            reduction_ratio: 8,
            use_encoder: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let r = self.backbone.downsampling();
        if self.image_size == 0 || !self.image_size.is_multiple_of(r) {
            return Err(config_err!(
                "image_size {} is not a positive multiple of the downsampling rate {r}",
                self.image_size
            ));
        }
        if self.encoder.n_classes == 0 {
            return Err(config_err!("n_classes must be positive"));
        }
        if self.use_encoder {
            self.encoder.validate()?;
        }
        if self.use_lbp && self.fusion == Fusion::Asf {
            let c = self.backbone.out_channels();
            if self.reduction_ratio == 0 || !c.is_multiple_of(self.reduction_ratio) {
                return Err(config_err!(
                    "reduction ratio {} must divide C_f = {c}",
                    self.reduction_ratio
                ));
            }
        }
        Ok(())
    }

    /// Side of the backbone output grid, `H / R`.
    pub fn grid(&self) -> usize {
        self.image_size / self.backbone.downsampling()
    }

    pub fn n_classes(&self) -> usize {
        self.encoder.n_classes
    }

    /// Applies the module toggles of an ablation variant.
    pub fn with_variant(&self, variant: Variant) -> Self {
        let (use_lbp, fusion, use_encoder) = variant.toggles();
        Self {
            use_lbp,
            fusion,
            use_encoder,
            ..self.clone()
        }
    }
}

/// Ablation settings: which of the LBP stream, the fusion module and the
/// encoder are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "+lbp")]
    Lbp,
    #[serde(rename = "+lbp+asf")]
    LbpAsf,
    #[serde(rename = "+mte")]
    Mte,
    #[serde(rename = "+lbp+mte")]
    LbpMte,
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "concat-fusion")]
    ConcatFusion,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Baseline,
        Variant::Lbp,
        Variant::LbpAsf,
        Variant::Mte,
        Variant::LbpMte,
        Variant::Full,
        Variant::ConcatFusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Lbp => "+lbp",
            Variant::LbpAsf => "+lbp+asf",
            Variant::Mte => "+mte",
            Variant::LbpMte => "+lbp+mte",
            Variant::Full => "full",
            Variant::ConcatFusion => "concat-fusion",
        }
    }

    /// `(use_lbp, fusion, use_encoder)`.
    pub fn toggles(self) -> (bool, Fusion, bool) {
        match self {
            Variant::Baseline => (false, Fusion::Add, false),
            Variant::Lbp => (true, Fusion::Add, false),
            Variant::LbpAsf => (true, Fusion::Asf, false),
            Variant::Mte => (false, Fusion::Add, true),
            Variant::LbpMte => (true, Fusion::Add, true),
            Variant::Full => (true, Fusion::Asf, true),
            Variant::ConcatFusion => (true, Fusion::Concat, true),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| config_err!("unknown variant {s:?}"))
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward<'g, T: Real> {
    /// `[N, M]`.
    pub logits: Var<'g, T>,
    /// `[N, H_d, W_d, C_f]`.
    pub fused: Var<'g, T>,
    /// `[N, T, C_p]` when the encoder runs.
    pub tokens: Option<Var<'g, T>>,
}

#[derive(Debug, Clone)]
pub struct Vtff<T: Real = f32> {
    cfg: ModelConfig,
    /// RGB backbone, or the single 6-channel backbone under concat fusion.
    pub rgb: Backbone<T>,
    pub lbp: Option<Backbone<T>>,
    pub asf: Option<Asf<T>>,
    pub tokenizer: Option<Tokenizer<T>>,
    pub encoder: Option<Encoder<T>>,
    /// `[C_p, M]` with the encoder, `[C_f, M]` without.
    pub theta: Param<T>,
}

impl<T: Real> Vtff<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let concat = cfg.use_lbp && cfg.fusion == Fusion::Concat;
        let two_streams = cfg.use_lbp && !concat;
        let rgb = if concat {
            Backbone::with_rng("backbone.concat", &cfg.backbone, 6, rng)?
        } else {
            Backbone::with_rng("backbone.rgb", &cfg.backbone, 3, rng)?
        };
        let lbp = two_streams
            .then(|| Backbone::with_rng("backbone.lbp", &cfg.backbone, 3, rng))
            .transpose()?;
        let c_f = cfg.backbone.out_channels();
        let asf = (two_streams && cfg.fusion == Fusion::Asf)
            .then(|| Asf::new("asf", c_f, cfg.reduction_ratio, cfg.eq6, rng))
            .transpose()?;
        let (tokenizer, encoder) = if cfg.use_encoder {
            let e = &cfg.encoder;
            let n = cfg.grid() * cfg.grid();
            (
                Some(Tokenizer::new("tokenizer", c_f, e.embed_dim, n, rng)),
                Some(Encoder::new("encoder", e, rng)?),
            )
        } else {
            (None, None)
        };
        let d = if cfg.use_encoder { cfg.encoder.embed_dim } else { c_f };
        let m = cfg.n_classes();
        let theta = Param::new("head.theta", uniform(&[d, m], 1.0 / (d as f64).sqrt(), rng));
        Ok(Self {
            cfg: cfg.clone(),
            rgb,
            lbp,
            asf,
            tokenizer,
            encoder,
            theta,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Fused `[N, H_d, W_d, C_f]` features of raw `[N, H, W, 3]` inputs.
    pub fn features<'g>(&self, g: &'g Graph<T>, rgb: Var<'g, T>, lbp: Var<'g, T>) -> Result<Var<'g, T>> {
        if !self.cfg.use_lbp {
            return self.rgb.forward(g, rgb);
        }
        if self.cfg.fusion == Fusion::Concat {
            let axis = rgb.shape().len() - 1;
            return self.rgb.forward(g, Var::concat(&[rgb, lbp], axis)?);
        }
        let lbp_stream = self.lbp.as_ref().expect("two-stream model");
        let x_rgb = self.rgb.forward(g, rgb)?;
        let x_lbp = lbp_stream.forward(g, lbp)?;
        match &self.asf {
            Some(asf) => asf.forward(g, x_lbp, x_rgb),
            None => x_lbp.add(x_rgb),
        }
    }

    /// Runs the network on a batch. `rgb` and `lbp` are `[N, H, W, 3]`.
    pub fn forward<'g>(&self, g: &'g Graph<T>, rgb: Var<'g, T>, lbp: Var<'g, T>) -> Result<(Forward<'g, T>, Vec<Var<'g, T>>)> {
        let shape = rgb.shape();
        let s = self.cfg.image_size;
        if shape.len() != 4 || shape[1] != s || shape[2] != s || shape[3] != 3 {
            return Err(dim_err!("expected [N, {s}, {s}, 3] input, got {shape:?}"));
        }
        if lbp.shape() != shape {
            return Err(dim_err!("LBP input {:?} does not match RGB input {shape:?}", lbp.shape()));
        }
        let fused = self.features(g, rgb, lbp)?;
        match (&self.tokenizer, &self.encoder) {
            (Some(tok), Some(enc)) => {
                let z0 = tok.forward(g, fused)?;
                let (z, maps) = enc.encode(g, z0)?;
                let logits = enc.classify(g, z, &self.theta)?;
                Ok((
                    Forward {
                        logits,
                        fused,
                        tokens: Some(z0),
                    },
                    maps,
                ))
            }
            _ => {
                let n = shape[0];
                let c = *fused.shape().last().unwrap();
                let pooled = fused.mean_axes(&[1, 2])?.reshape(&[n, c])?;
                let logits = pooled.matmul(g.param(&self.theta))?;
                Ok((
                    Forward {
                        logits,
                        fused,
                        tokens: None,
                    },
                    Vec::new(),
                ))
            }
        }
    }

    /// Mean cross-entropy of a batch; the caller runs backward on `g`.
    pub fn loss<'g>(&self, g: &'g Graph<T>, rgb: &Tensor<T>, lbp: &Tensor<T>, labels: &[usize]) -> Result<Var<'g, T>> {
        let (out, _) = self.forward(g, g.input(rgb.clone()), g.input(lbp.clone()))?;
        out.logits.cross_entropy(labels)
    }

    /// Eval-mode class probabilities `[N, M]`.
    pub fn probabilities(&self, rgb: &Tensor<T>, lbp: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new(Mode::Eval);
        let (out, _) = self.forward(&g, g.constant(rgb.clone()), g.constant(lbp.clone()))?;
        let p = out.logits.softmax(1)?.value();
        Ok((*p).clone())
    }

    /// Eval-mode predictions, lowest index winning ties.
    pub fn predict(&self, rgb: &Tensor<T>, lbp: &Tensor<T>) -> Result<Vec<usize>> {
        let p = self.probabilities(rgb, lbp)?;
        let m = p.shape()[1];
        Ok(p.data().chunks_exact(m).map(argmax).collect())
    }

    /// Eval-mode attention maps of every encoder layer.
    pub fn attention(&self, rgb: &Tensor<T>, lbp: &Tensor<T>) -> Result<AttentionMaps<T>> {
        let g = Graph::new(Mode::Eval);
        let (_, maps) = self.forward(&g, g.constant(rgb.clone()), g.constant(lbp.clone()))?;
        Ok(AttentionMaps {
            layers: maps.iter().map(|m| (*m.value()).clone()).collect(),
        })
    }

    /// Trainable scalars in the encoder layers and final norm.
    pub fn encoder_parameter_count(&self) -> usize {
        self.encoder.as_ref().map_or(0, |e| e.parameter_count())
    }
}

impl<T: Real> Module<T> for Vtff<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.rgb.visit(f);
        self.lbp.visit(f);
        self.asf.visit(f);
        self.tokenizer.visit(f);
        self.encoder.visit(f);
        f(&self.theta);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.rgb.visit_mut(f);
        self.lbp.visit_mut(f);
        self.asf.visit_mut(f);
        self.tokenizer.visit_mut(f);
        self.encoder.visit_mut(f);
        f(&mut self.theta);
    }
}
