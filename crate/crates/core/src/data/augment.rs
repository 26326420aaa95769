//! Random scale, rotation, flip and sensor noise, applied jointly to image and mask.
//!
//! Order: scale by `u ~ U(lo, hi)`, rotate by `theta ~ U(-max, max)` about the
//! centre, horizontal flip, Gaussian noise on the image (0-255 scale, clamped),
//! then centre-crop or reflect-pad back to the input size.

use serde::{Deserialize, Serialize};

use super::resample::{
    fit_image, fit_mask, flip_image, flip_mask, resize_bilinear, resize_nearest, rotate_image, rotate_mask,
};
use super::Sample;
use crate::error::{Error, Result};
use crate::rng::RngState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub scale_min: f64,
    pub scale_max: f64,
    pub max_rotation_deg: f64,
    pub flip_prob: f64,
    pub noise_std: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            scale_min: 0.75,
            scale_max: 1.25,
            max_rotation_deg: 15.0,
            flip_prob: 0.5,
            noise_std: 2.0,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            enabled: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.scale_min > 0.0
            && self.scale_min <= self.scale_max
            && self.scale_max.is_finite()
            && (0.0..=180.0).contains(&self.max_rotation_deg)
            && (0.0..=1.0).contains(&self.flip_prob)
            && self.noise_std >= 0.0
            && self.noise_std.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid augmentation settings {self:?}")))
        }
    }

    pub fn sample(&self, rng: &mut RngState) -> AugmentParams {
        AugmentParams {
            scale: rng.uniform(self.scale_min, self.scale_max),
            rotation_deg: rng.uniform(-self.max_rotation_deg, self.max_rotation_deg),
            flip: rng.bernoulli(self.flip_prob),
            noise_std: self.noise_std,
        }
    }
}

/// One draw of the augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub scale: f64,
    pub rotation_deg: f64,
    pub flip: bool,
    pub noise_std: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        scale: 1.0,
        rotation_deg: 0.0,
        flip: false,
        noise_std: 0.0,
    };
}

/// Draw parameters from `rng` and apply them. Noise uses a sub-stream of `rng`.
pub fn augment(sample: &Sample, cfg: &AugmentConfig, rng: &mut RngState) -> Result<Sample> {
    if !cfg.enabled {
        return Ok(sample.clone());
    }
    let params = cfg.sample(rng);
    let mut noise = rng.split(0);
    apply(sample, &params, &mut noise)
}

pub fn apply(sample: &Sample, p: &AugmentParams, noise_rng: &mut RngState) -> Result<Sample> {
    let (h, w) = sample.size();
    if h != w {
        return Err(Error::Data(format!("{}: augmentation expects a square sample", sample.id)));
    }
    let size = h;
    let scaled = ((size as f64 * p.scale).round() as usize).max(1);
    let mut image = resize_bilinear(&sample.image, scaled, scaled)?;
    let mut mask = resize_nearest(&sample.mask, scaled, scaled);

    image = rotate_image(&image, p.rotation_deg)?;
    mask = rotate_mask(&mask, p.rotation_deg, 0);

    if p.flip {
        image = flip_image(&image);
        mask = flip_mask(&mask);
    }

    if p.noise_std > 0.0 {
        for v in image.data_mut() {
            *v = (*v + (p.noise_std * noise_rng.standard_normal()) as f32).clamp(0.0, 255.0);
        }
    }

    Ok(Sample {
        id: sample.id.clone(),
        image: fit_image(&image, size)?,
        mask: fit_mask(&mask, size),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Mask;
    use crate::tensor::Tensor;

    fn sample(n: usize) -> Sample {
        let mut rng = RngState::new(2);
        Sample::new(
            "s",
            Tensor::from_fn(&[3, n, n], |_| rng.below(256) as f32).unwrap(),
            Mask {
                h: n,
                w: n,
                data: (0..n * n).map(|_| rng.below(7) as u8).collect(),
            },
        )
        .unwrap()
    }

    #[test]
    fn degenerate_parameters_are_identity() {
        let s = sample(32);
        let out = apply(&s, &AugmentParams::IDENTITY, &mut RngState::new(0)).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn double_flip_restores() {
        let s = sample(32);
        let flip = AugmentParams {
            flip: true,
            ..AugmentParams::IDENTITY
        };
        let once = apply(&s, &flip, &mut RngState::new(0)).unwrap();
        assert_ne!(once, s);
        assert_eq!(apply(&once, &flip, &mut RngState::new(0)).unwrap(), s);
    }

    #[test]
    fn output_contract_holds_for_random_draws() {
        let s = sample(48);
        let cfg = AugmentConfig::default();
        let mut rng = RngState::new(10);
        for _ in 0..40 {
            let out = augment(&s, &cfg, &mut rng).unwrap();
            assert_eq!(out.size(), (48, 48));
            assert_eq!(out.image.shape(), &[3, 48, 48]);
            assert!(out.mask.data.iter().all(|&v| v < 7));
            assert!(out.image.data().iter().all(|&v| (0.0..=255.0).contains(&v)));
        }
    }

    #[test]
    fn image_and_mask_share_geometry() {
        // encode each pixel's coordinates in both image and mask, then transform
        let n = 40;
        let image = Tensor::from_fn(&[3, n, n], |i| {
            let p = i % (n * n);
            match i / (n * n) {
                0 => (p / n) as f32 * 5.0,
                1 => (p % n) as f32 * 5.0,
                _ => 0.0,
            }
        })
        .unwrap();
        let mask = Mask {
            h: n,
            w: n,
            data: (0..n * n).map(|p| ((p / n) / 8 * 5 + (p % n) / 8) as u8 % 7).collect(),
        };
        let s = Sample {
            id: "grid".into(),
            image,
            mask,
        };
        let params = AugmentParams {
            scale: 1.1,
            rotation_deg: 9.0,
            flip: true,
            noise_std: 0.0,
        };
        let out = apply(&s, &params, &mut RngState::new(0)).unwrap();
        let mut agree = 0;
        let mut total = 0;
        for y in 4..n - 4 {
            for x in 4..n - 4 {
                let p = y * n + x;
                let sy = (out.image.data()[p] / 5.0).round() as usize;
                let sx = (out.image.data()[n * n + p] / 5.0).round() as usize;
                if sy >= n || sx >= n {
                    continue;
                }
                total += 1;
                if s.mask.get(sy, sx) == out.mask.data[p] {
                    agree += 1;
                }
            }
        }
        // disagreements only where bilinear rounding straddles a label edge
        assert!(agree as f64 / total as f64 > 0.9, "{agree}/{total}");
    }
}
