use std::path::Path;

use crate::error::{contract_err, dim_err, Result};
use crate::lbp::Image;
use crate::tensor::Tensor;

use super::netpbm::write_pnm;

/// Maps a `[0, 1]` grid to an 8-bit gray image, each cell becoming an
/// `upscale × upscale` block (0 is black, 1 is white).
pub fn heatmap_image(rollout: &Tensor<f32>, upscale: usize) -> Result<Image> {
    let [h, w] = rollout.shape() else {
        return Err(dim_err!("heatmap expects a 2-D grid, got {:?}", rollout.shape()));
    };
    if upscale == 0 {
        return Err(contract_err!("upscale factor must be positive"));
    }
    if rollout.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(contract_err!("heatmap values must lie in [0, 1]"));
    }
    let (h, w) = (*h, *w);
    Image::from_fn(h * upscale, w * upscale, 1, |y, x, _| {
        (rollout.data()[(y / upscale) * w + x / upscale] * 255.0).round() as u8
    })
}

pub fn export_heatmap(rollout: &Tensor<f32>, out: &Path, upscale: usize) -> Result<Image> {
    let img = heatmap_image(rollout, upscale)?;
    write_pnm(out, &img)?;
    Ok(img)
}
