//! Flat JSON run configuration; every key is optional.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::asf::Eq6Mode;
use crate::backbone::BackboneConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{Fusion, ModelConfig};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub oversample: bool,
    pub seed: u64,
    pub image_size: usize,
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub blocks_per_stage: usize,
    pub use_lbp: bool,
    pub fusion: Fusion,
    pub eq6: Eq6Mode,
    pub reduction_ratio: usize,
    pub use_encoder: bool,
    pub n_layers: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
    pub mlp_hidden: usize,
    pub n_classes: usize,
    /// Filled in by training so evaluation can map class directories.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_parts(&ModelConfig::default(), &TrainConfig::default())
    }
}

impl RunConfig {
    pub fn from_parts(m: &ModelConfig, t: &TrainConfig) -> Self {
        Self {
            base_lr: t.base_lr,
            warmup_steps: t.warmup_steps,
            total_steps: t.total_steps,
            batch_size: t.batch_size,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            oversample: t.oversample,
            seed: t.seed,
            image_size: m.image_size,
            stage_channels: m.backbone.stage_channels.clone(),
            stage_strides: m.backbone.stage_strides.clone(),
            blocks_per_stage: m.backbone.blocks_per_stage,
            use_lbp: m.use_lbp,
            fusion: m.fusion,
            eq6: m.eq6,
            reduction_ratio: m.reduction_ratio,
            use_encoder: m.use_encoder,
            n_layers: m.encoder.n_layers,
            n_heads: m.encoder.n_heads,
            embed_dim: m.encoder.embed_dim,
            mlp_hidden: m.encoder.mlp_hidden,
            n_classes: m.encoder.n_classes,
            class_names: None,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            image_size: self.image_size,
            backbone: BackboneConfig {
                stage_channels: self.stage_channels.clone(),
                stage_strides: self.stage_strides.clone(),
                blocks_per_stage: self.blocks_per_stage,
            },
            encoder: EncoderConfig {
                n_layers: self.n_layers,
                n_heads: self.n_heads,
                embed_dim: self.embed_dim,
                mlp_hidden: self.mlp_hidden,
                n_classes: self.n_classes,
            },
            use_lbp: self.use_lbp,
            fusion: self.fusion,
            eq6: self.eq6,
            reduction_ratio: self.reduction_ratio,
            use_encoder: self.use_encoder,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            base_lr: self.base_lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.total_steps,
            batch_size: self.batch_size,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            oversample: self.oversample,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.train().validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}
