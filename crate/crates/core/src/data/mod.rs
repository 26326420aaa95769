//! Dataset files, preprocessing, augmentation, splitting and synthetic data.
//!
//! A dataset directory holds pairs `image_XXXX.png` (RGB) and
//! `mask_XXXX.png` (8-bit single channel, pixel value = class id).

pub mod augment;
pub mod resample;
pub mod split;
pub mod synth;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, RgbImage};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 7;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "no damage",
    "concrete crack",
    "concrete spall",
    "exposed reinforcement",
    "steel corrosion",
    "steel fatigue crack",
    "asphalt crack",
];

/// Side length every sample is brought to before training.
pub const DEFAULT_SIZE: usize = 288;

/// Per-pixel class ids, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn zeros(h: usize, w: usize) -> Self {
        Mask {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::shape(&[data.len()], &[h, w]));
        }
        Ok(Mask { h, w, data })
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    /// First pixel whose label is `>= classes`, as (row, col, value).
    pub fn first_invalid(&self, classes: usize) -> Option<(usize, usize, u8)> {
        self.data
            .iter()
            .position(|&v| v as usize >= classes)
            .map(|i| (i / self.w, i % self.w, self.data[i]))
    }

    pub fn histogram(&self, classes: usize) -> Vec<u64> {
        let mut h = vec![0u64; classes];
        for &v in &self.data {
            h[v as usize] += 1;
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `(3, H, W)` RGB on the 0-255 scale.
    pub image: Tensor<f32>,
    pub mask: Mask,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: Mask) -> Result<Self> {
        let s = Sample {
            id: id.into(),
            image,
            mask,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn size(&self) -> (usize, usize) {
        (self.mask.h, self.mask.w)
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.image.shape();
        if shape != [3, self.mask.h, self.mask.w] {
            return Err(Error::Data(format!(
                "{}: image shape {shape:?} does not match mask {}x{}",
                self.id, self.mask.h, self.mask.w
            )));
        }
        if let Some((r, c, v)) = self.mask.first_invalid(NUM_CLASSES) {
            return Err(Error::Data(format!("{}: mask value {v} at ({r}, {c}) is not a class id", self.id)));
        }
        Ok(())
    }

    /// Copy with the mask reduced to damage / no-damage.
    pub fn binary(&self) -> Sample {
        Sample {
            id: self.id.clone(),
            image: self.image.clone(),
            mask: derive_binary_mask(&self.mask),
        }
    }
}

/// 1 where the mask holds any damage class, else 0.
pub fn derive_binary_mask(mask: &Mask) -> Mask {
    Mask {
        h: mask.h,
        w: mask.w,
        data: mask.data.iter().map(|&v| u8::from(v > 0)).collect(),
    }
}

/// Per-class pixel totals over a set of samples.
pub fn class_pixel_counts(samples: &[Sample], classes: usize) -> Vec<u64> {
    let mut total = vec![0u64; classes];
    for s in samples {
        for (t, c) in total.iter_mut().zip(s.mask.histogram(classes)) {
            *t += c;
        }
    }
    total
}

/// Per-channel input standardization, computed on the training set and stored with the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization {
        mean: [0.0; 3],
        std: [1.0; 3],
    };

    pub fn compute(samples: &[Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("cannot compute input statistics of an empty dataset".into()));
        }
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut count = 0usize;
        for s in samples {
            let plane = s.mask.h * s.mask.w;
            for c in 0..3 {
                for &v in &s.image.data()[c * plane..(c + 1) * plane] {
                    sum[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
            count += plane;
        }
        let mean = sum.map(|v| v / count as f64);
        let mut std = [0.0; 3];
        for c in 0..3 {
            std[c] = (sq[c] / count as f64 - mean[c] * mean[c]).max(0.0).sqrt().max(1e-3);
        }
        Ok(Normalization { mean, std })
    }

    /// Standardize an `(N, 3, H, W)` batch.
    pub fn apply(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        let d = batch.dims4()?;
        if d.c != 3 {
            return Err(Error::invalid_shape(batch.shape(), "expected 3 channels"));
        }
        let mut out = batch.clone();
        for (i, plane) in out.data_mut().chunks_mut(d.plane()).enumerate() {
            let c = i % 3;
            let (m, s) = (self.mean[c] as f32, self.std[c] as f32);
            for v in plane {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.std.iter().all(|s| *s > 0.0 && s.is_finite()) && self.mean.iter().all(|m| m.is_finite()) {
            Ok(())
        } else {
            Err(Error::Data(format!("invalid normalization {self:?}")))
        }
    }
}

/// Stack samples into an `(N, 3, H, W)` image batch and flat labels.
pub fn stack(samples: &[&Sample]) -> Result<(Tensor<f32>, Vec<u8>)> {
    let Some(first) = samples.first() else {
        return Err(Error::InvalidArgument("cannot stack an empty batch".into()));
    };
    let (h, w) = first.size();
    let mut images = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut labels = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.size() != (h, w) {
            return Err(Error::Data(format!("{} is {:?}, batch is {:?}", s.id, s.size(), (h, w))));
        }
        images.extend_from_slice(s.image.data());
        labels.extend_from_slice(&s.mask.data);
    }
    Ok((Tensor::new(vec![samples.len(), 3, h, w], images)?, labels))
}

pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.as_raw();
    let mut data = vec![0.0f32; 3 * h * w];
    for c in 0..3 {
        for p in 0..h * w {
            data[c * h * w + p] = raw[p * 3 + c] as f32;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let DynamicImage::ImageLuma8(gray) = img else {
        return Err(Error::Data(format!(
            "{}: mask must be an 8-bit single-channel PNG, found {:?}",
            path.display(),
            img.color()
        )));
    };
    Mask::new(gray.height() as usize, gray.width() as usize, gray.into_raw())
}

pub fn write_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let [3, h, w] = image.shape()[..] else {
        return Err(Error::invalid_shape(image.shape(), "expected (3, H, W)"));
    };
    let mut raw = vec![0u8; 3 * h * w];
    for c in 0..3 {
        for p in 0..h * w {
            raw[p * 3 + c] = image.data()[c * h * w + p].round().clamp(0.0, 255.0) as u8;
        }
    }
    let img = RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized for image");
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let img = GrayImage::from_raw(mask.w as u32, mask.h as u32, mask.data.clone()).expect("buffer sized for mask");
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("image_{id}.png"))
}

pub fn mask_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("mask_{id}.png"))
}

pub fn write_sample(dir: &Path, sample: &Sample) -> Result<()> {
    write_image(&image_path(dir, &sample.id), &sample.image)?;
    write_mask(&mask_path(dir, &sample.id), &sample.mask)
}

/// A pair that failed validation; loading continues without it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FileError {
    pub id: String,
    pub message: String,
}

#[derive(Clone, Debug)]
pub struct LoadReport {
    pub samples: Vec<Sample>,
    pub errors: Vec<FileError>,
}

/// Load one pair, bringing it to `size x size` (image bilinear, mask nearest).
pub fn load_pair(dir: &Path, id: &str, size: usize) -> Result<Sample> {
    let image = read_image(&image_path(dir, id))?;
    let mask = read_mask(&mask_path(dir, id))?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if (mask.h, mask.w) != (h, w) {
        return Err(Error::Data(format!(
            "image is {w}x{h} but mask is {}x{}",
            mask.w, mask.h
        )));
    }
    if let Some((r, c, v)) = mask.first_invalid(NUM_CLASSES) {
        return Err(Error::Data(format!("mask value {v} at ({r}, {c}) exceeds the last class id 6")));
    }
    if h != w || h < size {
        return Err(Error::Data(format!("{w}x{h} input must be square and at least {size}x{size}")));
    }
    let image = resample::resize_bilinear(&image, size, size)?;
    let mask = resample::resize_nearest(&mask, size, size);
    Sample::new(id, image, mask)
}

/// Load every pair in `dir`. Per-pair problems land in `errors`; only an unreadable directory is fatal.
pub fn load_dataset(dir: &Path, size: usize) -> Result<LoadReport> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    // id -> (has image, has mask)
    let mut ids: BTreeMap<String, (bool, bool)> = BTreeMap::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(stem) = name.strip_suffix(".png") else {
            continue;
        };
        if let Some(id) = stem.strip_prefix("image_") {
            ids.entry(id.to_string()).or_default().0 = true;
        } else if let Some(id) = stem.strip_prefix("mask_") {
            ids.entry(id.to_string()).or_default().1 = true;
        }
    }
    let mut errors = Vec::new();
    let mut complete = Vec::new();
    for (id, pair) in ids {
        match pair {
            (true, true) => complete.push(id),
            (true, false) => errors.push(FileError {
                message: format!("image_{id}.png has no mask_{id}.png"),
                id,
            }),
            _ => errors.push(FileError {
                message: format!("mask_{id}.png has no image_{id}.png"),
                id,
            }),
        }
    }
    let loaded = par::map_indices(complete.len(), |i| load_pair(dir, &complete[i], size));
    let mut samples = Vec::new();
    for (id, r) in complete.into_iter().zip(loaded) {
        match r {
            Ok(s) => samples.push(s),
            Err(e) => errors.push(FileError {
                id,
                message: e.to_string(),
            }),
        }
    }
    errors.sort_by(|a, b| a.id.cmp(&b.id));
    for e in &errors {
        warn!("skipping {}: {}", e.id, e.message);
    }
    Ok(LoadReport { samples, errors })
}
