//! 8-bit images and the local-binary-pattern texture image.
//!
//! The LBP code of a pixel compares its 8 radius-1 neighbors with the
//! center using `>=`. Bits are packed clockwise from the top-left
//! neighbor, which is the most significant bit:
//!
//! ```text
//! 7 6 5
//! 0 c 4
//! 1 2 3
//! ```
//!
//! (bit index shown; bit 7 = top-left). Pixels outside the image take the
//! value of the nearest border pixel.

use crate::error::{contract_err, Result};
use crate::tensor::{Real, Tensor};

/// Row-major, channel-interleaved 8-bit image with 1 or 3 channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(contract_err!("image must be at least 1×1, got {height}×{width}"));
        }
        if channels != 1 && channels != 3 {
            return Err(contract_err!("images have 1 or 3 channels, got {channels}"));
        }
        if pixels.len() != height * width * channels {
            return Err(contract_err!(
                "{height}×{width}×{channels} image needs {} bytes, got {}",
                height * width * channels,
                pixels.len()
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> u8) -> Result<Self> {
        let mut pixels = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    pixels.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Pixel intensities as an `H×W×C` tensor of raw `[0, 255]` values.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            [self.height, self.width, self.channels],
            self.pixels.iter().map(|&p| T::lit(f64::from(p))).collect(),
        )
        .expect("consistent image")
    }

    /// Three-channel view: gray images are replicated, RGB is returned as is.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            self.clone()
        } else {
            replicate3(self).expect("single channel")
        }
    }
}

/// BT.601 luma, `round(0.299·R + 0.587·G + 0.114·B)`.
pub fn to_grayscale(img: &Image) -> Result<Image> {
    if img.channels != 3 {
        return Err(contract_err!("to_grayscale expects 3 channels, got {}", img.channels));
    }
    let pixels = img
        .pixels
        .chunks_exact(3)
        .map(|p| {
            let luma = 0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2]);
            luma.round().clamp(0.0, 255.0) as u8
        })
        .collect();
    Image::new(img.height, img.width, 1, pixels)
}

/// Neighbor offsets `(dy, dx)` from most to least significant bit.
const NEIGHBORS: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
];

/// Classic 256-code LBP with replicate border padding.
pub fn lbp8(img: &Image) -> Result<Image> {
    if img.channels != 1 {
        return Err(contract_err!("lbp8 expects 1 channel, got {}", img.channels));
    }
    let (h, w) = (img.height as isize, img.width as isize);
    let at = |y: isize, x: isize| img.pixels[(y.clamp(0, h - 1) * w + x.clamp(0, w - 1)) as usize];
    let mut out = Vec::with_capacity(img.pixels.len());
    for y in 0..h {
        for x in 0..w {
            let center = at(y, x);
            let code = NEIGHBORS
                .iter()
                .fold(0u8, |code, &(dy, dx)| (code << 1) | u8::from(at(y + dy, x + dx) >= center));
            out.push(code);
        }
    }
    Image::new(img.height, img.width, 1, out)
}

/// Copies a gray image into three identical channels.
pub fn replicate3(img: &Image) -> Result<Image> {
    if img.channels != 1 {
        return Err(contract_err!("replicate3 expects 1 channel, got {}", img.channels));
    }
    let pixels = img.pixels.iter().flat_map(|&p| [p, p, p]).collect();
    Image::new(img.height, img.width, 3, pixels)
}

/// The `H×W×3` LBP feature image of an RGB (or gray) face image.
pub fn lbp_image(img: &Image) -> Result<Image> {
    let gray = if img.channels == 3 { to_grayscale(img)? } else { img.clone() };
    replicate3(&lbp8(&gray)?)
}

/// Bilinear resampling with half-pixel centers and clamped borders.
pub fn resize_bilinear(img: &Image, height: usize, width: usize) -> Result<Image> {
    if height == 0 || width == 0 {
        return Err(contract_err!("resize target must be at least 1×1"));
    }
    if height == img.height && width == img.width {
        return Ok(img.clone());
    }
    let c = img.channels;
    let sy = img.height as f64 / height as f64;
    let sx = img.width as f64 / width as f64;
    let taps = |o: usize, scale: f64, limit: usize| {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(limit - 1);
        let hi = (lo + 1).min(limit - 1);
        (lo, hi, src - lo as f64)
    };
    let mut pixels = Vec::with_capacity(height * width * c);
    for oy in 0..height {
        let (y0, y1, fy) = taps(oy, sy, img.height);
        for ox in 0..width {
            let (x0, x1, fx) = taps(ox, sx, img.width);
            for ch in 0..c {
                let p = |y, x| f64::from(img.get(y, x, ch));
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                pixels.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Image::new(height, width, c, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gray(h: usize, w: usize, px: &[u8]) -> Image {
        Image::new(h, w, 1, px.to_vec()).unwrap()
    }

    #[test]
    fn luma_of_primaries() {
        let img = Image::new(1, 3, 3, vec![255, 255, 255, 255, 0, 0, 9, 9, 9]).unwrap();
        assert_eq!(to_grayscale(&img).unwrap().pixels(), &[255, 76, 9]);
        for v in 0..=255u8 {
            let g = to_grayscale(&Image::new(1, 1, 3, vec![v, v, v]).unwrap()).unwrap();
            assert_eq!(g.pixels(), &[v]);
        }
    }

    #[test]
    fn wrong_channel_counts_are_rejected() {
        assert!(to_grayscale(&gray(1, 1, &[3])).is_err());
        let rgb = Image::new(1, 1, 3, vec![1, 2, 3]).unwrap();
        assert!(lbp8(&rgb).is_err());
        assert!(replicate3(&rgb).is_err());
        assert!(Image::new(2, 2, 2, vec![0; 8]).is_err());
    }

    #[test]
    fn constant_image_codes_are_all_ones() {
        let out = lbp8(&gray(4, 5, &[77; 20])).unwrap();
        assert!(out.pixels().iter().all(|&c| c == 255));
    }

    #[test]
    fn isolated_pit() {
        let mut px = [255u8; 25];
        px[12] = 0;
        let out = lbp8(&gray(5, 5, &px)).unwrap();
        assert_eq!(out.get(2, 2, 0), 255);
        for (dy, dx) in NEIGHBORS {
            let code = out.get((2 + dy) as usize, (2 + dx) as usize, 0);
            assert_eq!(code.count_zeros(), 1, "neighbor ({dy},{dx}) code {code:08b}");
        }
        // The top-left neighbor sees the pit at its bottom-right (bit 3).
        assert_eq!(out.get(1, 1, 0), 0b1111_0111);
    }

    #[test]
    fn hand_packed_center_code() {
        let img = gray(3, 3, &[10, 20, 30, 40, 50, 60, 70, 80, 90]);
        assert_eq!(lbp8(&img).unwrap().get(1, 1, 0), 30);
    }

    #[test]
    fn replicate_single_pixel() {
        let out = replicate3(&gray(1, 1, &[7])).unwrap();
        assert_eq!(out.pixels(), &[7, 7, 7]);
    }

    #[test]
    fn resize_keeps_constant_images_constant() {
        let img = Image::new(5, 7, 3, vec![123; 105]).unwrap();
        let out = resize_bilinear(&img, 224, 224).unwrap();
        assert_eq!((out.height(), out.width()), (224, 224));
        assert!(out.pixels().iter().all(|&p| p == 123));
        let up = resize_bilinear(&gray(1, 2, &[0, 100]), 1, 4).unwrap();
        assert_eq!(up.pixels(), &[0, 25, 75, 100]);
    }

    fn arb_gray() -> impl Strategy<Value = Image> {
        (1usize..7, 1usize..7).prop_flat_map(|(h, w)| {
            proptest::collection::vec(0u8..=255, h * w).prop_map(move |px| Image::new(h, w, 1, px).unwrap())
        })
    }

    proptest! {
        #[test]
        fn replicate_then_gray_is_identity(img in arb_gray()) {
            let rgb = replicate3(&img).unwrap();
            for p in rgb.pixels().chunks(3) {
                prop_assert!(p[0] == p[1] && p[1] == p[2]);
            }
            prop_assert_eq!(to_grayscale(&rgb).unwrap(), img);
        }

        #[test]
        fn lbp_ignores_intensity_shift(img in arb_gray(), shift in -100i32..100) {
            let lo = *img.pixels().iter().min().unwrap() as i32;
            let hi = *img.pixels().iter().max().unwrap() as i32;
            prop_assume!(lo + shift >= 0 && hi + shift <= 255);
            let shifted = Image::new(
                img.height(), img.width(), 1,
                img.pixels().iter().map(|&p| (p as i32 + shift) as u8).collect(),
            ).unwrap();
            prop_assert_eq!(lbp8(&shifted).unwrap(), lbp8(&img).unwrap());
        }

        #[test]
        fn lbp_ignores_positive_affine_scaling(img in arb_gray(), scale in 1u32..4, shift in 0u32..10) {
            let hi = *img.pixels().iter().max().unwrap() as u32;
            prop_assume!(hi * scale + shift <= 255);
            let scaled = Image::new(
                img.height(), img.width(), 1,
                img.pixels().iter().map(|&p| (p as u32 * scale + shift) as u8).collect(),
            ).unwrap();
            prop_assert_eq!(lbp8(&scaled).unwrap(), lbp8(&img).unwrap());
        }
    }
}
