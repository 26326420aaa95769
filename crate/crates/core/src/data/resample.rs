//! Resizing and rotation for (C, H, W) images and label masks.

use crate::data::Mask;
use crate::error::Result;
use crate::tensor::Tensor;

/// Mirror an index into `[0, n)` without repeating the edge sample.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Border {
    /// Clamp coordinates to the nearest edge sample.
    Clamp,
    Reflect,
}

fn fetch(plane: &[f32], h: usize, w: usize, y: isize, x: isize, border: Border) -> f32 {
    let (y, x) = match border {
        Border::Clamp => (y.clamp(0, h as isize - 1) as usize, x.clamp(0, w as isize - 1) as usize),
        Border::Reflect => (reflect_index(y, h), reflect_index(x, w)),
    };
    plane[y * w + x]
}

fn bilinear(plane: &[f32], h: usize, w: usize, sy: f64, sx: f64, border: Border) -> f32 {
    let (y0, x0) = (sy.floor(), sx.floor());
    let (fy, fx) = ((sy - y0) as f32, (sx - x0) as f32);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let p = |dy, dx| fetch(plane, h, w, y0 + dy, x0 + dx, border);
    let top = p(0, 0) + (p(0, 1) - p(0, 0)) * fx;
    let bottom = p(1, 0) + (p(1, 1) - p(1, 0)) * fx;
    top + (bottom - top) * fy
}

/// Source coordinate of destination sample `i` under half-pixel-centre alignment.
fn source_coord(i: usize, src: usize, dst: usize) -> f64 {
    (i as f64 + 0.5) * src as f64 / dst as f64 - 0.5
}

pub fn resize_bilinear(img: &Tensor<f32>, oh: usize, ow: usize) -> Result<Tensor<f32>> {
    let [c, h, w] = img.shape()[..] else {
        return Err(crate::Error::invalid_shape(img.shape(), "expected (C, H, W)"));
    };
    if (oh, ow) == (h, w) {
        return Ok(img.clone());
    }
    let mut out = Vec::with_capacity(c * oh * ow);
    for plane in img.data().chunks(h * w) {
        for y in 0..oh {
            let sy = source_coord(y, h, oh);
            for x in 0..ow {
                out.push(bilinear(plane, h, w, sy, source_coord(x, w, ow), Border::Clamp));
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

pub fn resize_nearest(mask: &Mask, oh: usize, ow: usize) -> Mask {
    if (oh, ow) == (mask.h, mask.w) {
        return mask.clone();
    }
    let nearest = |i: usize, src: usize, dst: usize| {
        (source_coord(i, src, dst).round().max(0.0) as usize).min(src - 1)
    };
    let mut data = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let sy = nearest(y, mask.h, oh);
        for x in 0..ow {
            data.push(mask.data[sy * mask.w + nearest(x, mask.w, ow)]);
        }
    }
    Mask { h: oh, w: ow, data }
}

/// Inverse rotation about the image centre: where output pixel (y, x) samples from.
fn rotate_source(y: usize, x: usize, h: usize, w: usize, cos: f64, sin: f64) -> (f64, f64) {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
    (cy + sin * dx + cos * dy, cx + cos * dx - sin * dy)
}

/// Rotate counter-clockwise by `degrees`; bilinear with reflected borders.
pub fn rotate_image(img: &Tensor<f32>, degrees: f64) -> Result<Tensor<f32>> {
    let [_, h, w] = img.shape()[..] else {
        return Err(crate::Error::invalid_shape(img.shape(), "expected (C, H, W)"));
    };
    if degrees == 0.0 {
        return Ok(img.clone());
    }
    let (sin, cos) = degrees.to_radians().sin_cos();
    let mut out = Vec::with_capacity(img.len());
    for plane in img.data().chunks(h * w) {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = rotate_source(y, x, h, w, cos, sin);
                out.push(bilinear(plane, h, w, sy, sx, Border::Reflect));
            }
        }
    }
    Tensor::new(img.shape().to_vec(), out)
}

/// Rotate a mask with nearest sampling; pixels that map outside the source get `fill`.
pub fn rotate_mask(mask: &Mask, degrees: f64, fill: u8) -> Mask {
    if degrees == 0.0 {
        return mask.clone();
    }
    let (h, w) = (mask.h, mask.w);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = rotate_source(y, x, h, w, cos, sin);
            let (ry, rx) = (sy.round(), sx.round());
            let inside = ry >= 0.0 && rx >= 0.0 && ry < h as f64 && rx < w as f64;
            data.push(if inside { mask.data[ry as usize * w + rx as usize] } else { fill });
        }
    }
    Mask { h, w, data }
}

pub fn flip_image(img: &Tensor<f32>) -> Tensor<f32> {
    let w = img.shape()[2];
    let mut out = img.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

pub fn flip_mask(mask: &Mask) -> Mask {
    let mut out = mask.clone();
    for row in out.data.chunks_mut(mask.w) {
        row.reverse();
    }
    out
}

/// Centre-crop or reflect-pad each axis to `size`.
fn fit_index(i: usize, have: usize, size: usize) -> usize {
    if have >= size {
        i + (have - size) / 2
    } else {
        reflect_index(i as isize - ((size - have) / 2) as isize, have)
    }
}

pub fn fit_image(img: &Tensor<f32>, size: usize) -> Result<Tensor<f32>> {
    let [c, h, w] = img.shape()[..] else {
        return Err(crate::Error::invalid_shape(img.shape(), "expected (C, H, W)"));
    };
    if (h, w) == (size, size) {
        return Ok(img.clone());
    }
    let mut out = Vec::with_capacity(c * size * size);
    for plane in img.data().chunks(h * w) {
        for y in 0..size {
            let sy = fit_index(y, h, size);
            for x in 0..size {
                out.push(plane[sy * w + fit_index(x, w, size)]);
            }
        }
    }
    Tensor::new(vec![c, size, size], out)
}

pub fn fit_mask(mask: &Mask, size: usize) -> Mask {
    if (mask.h, mask.w) == (size, size) {
        return mask.clone();
    }
    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        let sy = fit_index(y, mask.h, size);
        for x in 0..size {
            data.push(mask.data[sy * mask.w + fit_index(x, mask.w, size)]);
        }
    }
    Mask { h: size, w: size, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn(&[c, h, w], |i| (i % (h * w)) as f32).unwrap()
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn same_size_is_identity() {
        let img = ramp(3, 8, 8);
        assert_eq!(resize_bilinear(&img, 8, 8).unwrap(), img);
        assert_eq!(rotate_image(&img, 0.0).unwrap(), img);
        assert_eq!(fit_image(&img, 8).unwrap(), img);
    }

    #[test]
    fn bilinear_preserves_linear_ramps_inside() {
        // a horizontal ramp stays a ramp when upsampled 2x (away from clamped edges)
        let img = Tensor::from_fn(&[1, 4, 8], |i| (i % 8) as f32 * 2.0).unwrap();
        let up = resize_bilinear(&img, 8, 16).unwrap();
        for x in 1..15 {
            let want = (x as f32 + 0.5) / 2.0 - 0.5;
            assert!((up.data()[3 * 16 + x] - want * 2.0).abs() < 1e-5);
        }
    }

    #[test]
    fn nearest_keeps_label_set() {
        let mut m = Mask::zeros(600, 600);
        for y in 0..600 {
            for x in 300..600 {
                m.data[y * 600 + x] = 3;
            }
        }
        let r = resize_nearest(&m, 288, 288);
        let mut seen: Vec<u8> = r.data.clone();
        seen.sort();
        seen.dedup();
        assert_eq!(seen, vec![0, 3]);
        assert_eq!(r.data.iter().filter(|&&v| v == 3).count(), 288 * 144);
    }

    #[test]
    fn rotation_by_90_degrees_permutes() {
        let img = ramp(1, 5, 5);
        let r = rotate_image(&img, 90.0).unwrap();
        // counter-clockwise: the top-right corner moves to the top-left
        assert!((r.data()[0] - img.data()[4]).abs() < 1e-4);
        let m = Mask {
            h: 5,
            w: 5,
            data: (0..25).map(|i| i as u8).collect(),
        };
        let rm = rotate_mask(&m, 90.0, 0);
        assert_eq!(rm.data[0], 4);
        assert_eq!(rm.data[12], 12);
    }

    #[test]
    fn rotated_mask_fills_corners() {
        let m = Mask {
            h: 32,
            w: 32,
            data: vec![5; 1024],
        };
        let r = rotate_mask(&m, 15.0, 0);
        assert_eq!(r.data[0], 0);
        assert_eq!(r.data[16 * 32 + 16], 5);
    }

    #[test]
    fn crop_and_pad() {
        let img = ramp(1, 6, 6);
        let c = fit_image(&img, 4).unwrap();
        assert_eq!(c.data()[0], img.data()[6 + 1]);
        let p = fit_image(&img, 8).unwrap();
        // one reflected row/col on each side
        assert_eq!(p.data()[0], img.data()[6 + 1]);
        assert_eq!(p.data()[8 + 1], img.data()[0]);
    }
}
