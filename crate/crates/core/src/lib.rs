//! Facial-expression recognition from RGB and LBP streams, fused with
//! attentional selective fusion and classified by a Transformer encoder
//! over visual-word tokens.

pub mod asf;
pub mod autograd;
pub mod backbone;
pub mod encoder;
mod error;
pub mod io;
pub mod lbp;
pub mod model;
pub mod nn;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Fusion, ModelConfig, Variant, Vtff};
pub use tensor::{Real, Tensor};
