//! Procedural datasets for smoke tests and ablations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::lbp::Image;

/// Binary pattern value of texture `kind` at `(y, x)` with phase `p`.
fn pattern(kind: usize, y: usize, x: usize, p: usize, period: usize) -> bool {
    let half = period / 2;
    match kind % 4 {
        0 => (y + p) % period < half,
        1 => (x + p) % period < half,
        2 => (x + y + p) % period < half,
        _ => ((x + p) / half + (y + p) / half).is_multiple_of(2),
    }
}

/// Images with their class indices, and the class names.
pub type Labeled = (Vec<(Image, usize)>, Vec<String>);

const PALETTE: [[f64; 3]; 4] = [
    [200.0, 60.0, 50.0],
    [60.0, 180.0, 70.0],
    [50.0, 80.0, 210.0],
    [210.0, 200.0, 60.0],
];

/// Four classes, each with its own stripe orientation and base color.
/// Phase, brightness and a little pixel noise vary per image.
pub fn texture_color(per_class: usize, size: usize, seed: u64) -> Result<Labeled> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(4 * per_class);
    for (class, color) in PALETTE.iter().enumerate() {
        for _ in 0..per_class {
            let phase = rng.random_range(0..8);
            let gain = rng.random_range(0.8..1.2);
            let img = Image::from_fn(size, size, 3, |_, _, _| 0)?;
            let mut px = img.pixels().to_vec();
            for y in 0..size {
                for x in 0..size {
                    let on = pattern(class, y, x, phase, 8);
                    for c in 0..3 {
                        let base = color[c] * gain * if on { 1.0 } else { 0.45 };
                        let noise = rng.random_range(-8.0..8.0);
                        px[(y * size + x) * 3 + c] = (base + noise).round().clamp(0.0, 255.0) as u8;
                    }
                }
            }
            out.push((Image::new(size, size, 3, px)?, class));
        }
    }
    Ok((out, (0..4).map(|c| format!("class{c}")).collect()))
}

/// Two classes whose label is the XOR of a texture bit and a color bit.
///
/// The texture (horizontal or vertical stripes) has an amplitude of a few
/// gray levels, so it barely registers in raw intensities but fully
/// determines the LBP codes. The color (warm or cool hue) is large in RGB
/// but has no effect on the LBP image. Neither view alone predicts the
/// label.
pub fn split_modality(per_class: usize, size: usize, seed: u64) -> Result<Labeled> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * per_class);
    let hues: [[f64; 3]; 2] = [[150.0, 110.0, 90.0], [90.0, 110.0, 150.0]];
    for i in 0..2 * per_class {
        let label = i % 2;
        let color = (i / 2) % 2;
        let texture = label ^ color;
        let phase = rng.random_range(0..4);
        let shift = rng.random_range(-40.0..40.0);
        let amp = rng.random_range(2.0..4.0);
        let hue = hues[color];
        let img = Image::from_fn(size, size, 3, |y, x, c| {
            let on = pattern(texture, y, x, phase, 4);
            let v = hue[c] + shift + if on { amp } else { 0.0 };
            v.round().clamp(0.0, 255.0) as u8
        })?;
        out.push((img, label));
    }
    Ok((out, vec!["neg".into(), "pos".into()]))
}
