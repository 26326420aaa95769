use image::{Rgb, RgbImage};

use crate::data::{Mask, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Display colour per class; class 0 is never drawn.
pub const PALETTE: [[u8; 3]; NUM_CLASSES] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
];

/// Height of the legend strip below the image.
pub const LEGEND_HEIGHT: usize = 16;

/// Blend the damage pixels of `mask` over `image` (`(3, H, W)`, 0-255) with
/// weight `alpha`, then append a legend strip with one swatch per damage class.
pub fn render_overlay(image: &Tensor<f32>, mask: &Mask, alpha: f32) -> Result<RgbImage> {
    let [3, h, w] = image.shape()[..] else {
        return Err(Error::invalid_shape(image.shape(), "expected a (3, H, W) image"));
    };
    if (mask.h, mask.w) != (h, w) {
        return Err(Error::shape(&[mask.h, mask.w], &[h, w]));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("blend factor {alpha} outside [0, 1]")));
    }
    if let Some((r, c, v)) = mask.first_invalid(NUM_CLASSES) {
        return Err(Error::Data(format!("mask value {v} at ({r}, {c}) is not a class id")));
    }
    let plane = h * w;
    let px = image.data();
    let mut out = RgbImage::new(w as u32, (h + LEGEND_HEIGHT) as u32);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let label = mask.data[p] as usize;
            let rgb = std::array::from_fn(|c| {
                let v = px[c * plane + p].clamp(0.0, 255.0);
                let v = if label == 0 {
                    v
                } else {
                    (1.0 - alpha) * v + alpha * PALETTE[label][c] as f32
                };
                v.round() as u8
            });
            out.put_pixel(x as u32, y as u32, Rgb(rgb));
        }
    }
    let swatch = (w / (NUM_CLASSES - 1)).max(1);
    for x in 0..w {
        let class = (x / swatch + 1).min(NUM_CLASSES - 1);
        for y in h..h + LEGEND_HEIGHT {
            out.put_pixel(x as u32, y as u32, Rgb(PALETTE[class]));
        }
    }
    Ok(out)
}
