//! Synthetic stand-in dataset with exact labels.
//!
//! Each image is a textured surface (concrete, steel or asphalt) with a few
//! damage primitives drawn over it:
//!
//! | class | primitive | surface |
//! |---|---|---|
//! | 1 concrete crack | dark polyline | concrete |
//! | 2 spall | light rough blob | concrete |
//! | 3 exposed reinforcement | cluster of parallel bars | concrete |
//! | 4 corrosion | rust patch | steel |
//! | 5 fatigue crack | dark polyline | steel |
//! | 6 asphalt crack | dark polyline | asphalt |
//!
//! The three crack classes look alike locally and are told apart by the
//! surrounding surface. Labels are decided per `cell x cell` block (cell
//! centre inside a primitive), then the image is painted from the mask, so
//! image and mask agree exactly.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use super::{Mask, Sample};
use crate::error::{Error, Result};
use crate::par;
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub size: usize,
    /// Label granularity in pixels; 1 gives free-form edges.
    pub cell: usize,
    /// Fraction of images with no damage at all.
    pub clean_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            size: super::DEFAULT_SIZE,
            cell: 4,
            clean_fraction: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn with_size(size: usize) -> Self {
        SynthConfig {
            size,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 16 || self.cell == 0 || self.size % self.cell != 0 {
            return Err(Error::Config(format!(
                "synthetic size {} must be >= 16 and a multiple of cell {}",
                self.size, self.cell
            )));
        }
        if !(0.0..=1.0).contains(&self.clean_fraction) {
            return Err(Error::Config("clean_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Surface {
    Concrete,
    Steel,
    Asphalt,
}

impl Surface {
    fn base(self) -> [f64; 3] {
        match self {
            Surface::Concrete => [152.0, 149.0, 141.0],
            Surface::Steel => [92.0, 108.0, 136.0],
            Surface::Asphalt => [74.0, 73.0, 78.0],
        }
    }

    fn damage_classes(self) -> &'static [u8] {
        match self {
            Surface::Concrete => &[1, 2, 3],
            Surface::Steel => &[4, 5],
            Surface::Asphalt => &[6],
        }
    }
}

/// Colour and per-pixel noise of each damage class.
fn appearance(class: u8) -> ([f64; 3], f64) {
    match class {
        1 | 5 => ([30.0, 28.0, 27.0], 5.0),
        6 => ([14.0, 14.0, 15.0], 4.0),
        2 => ([208.0, 192.0, 166.0], 12.0),
        3 => ([104.0, 66.0, 47.0], 8.0),
        4 => ([168.0, 84.0, 34.0], 14.0),
        _ => unreachable!("class 0 uses the surface colour"),
    }
}

enum Shape {
    Polyline { points: Vec<(f64, f64)>, half_width: f64 },
    Blob { cy: f64, cx: f64, radius: f64, harmonics: [(f64, f64, f64); 2] },
    Bars { cy: f64, cx: f64, angle: f64, offsets: Vec<f64>, half_len: f64, half_width: f64 },
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let len2 = dy * dy + dx * dx;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dy + (p.1 - a.1) * dx) / len2).clamp(0.0, 1.0)
    };
    let (qy, qx) = (a.0 + t * dy, a.1 + t * dx);
    ((p.0 - qy).powi(2) + (p.1 - qx).powi(2)).sqrt()
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match self {
            Shape::Polyline { points, half_width } => points
                .windows(2)
                .any(|s| segment_distance((y, x), s[0], s[1]) <= *half_width),
            Shape::Blob {
                cy,
                cx,
                radius,
                harmonics,
            } => {
                let (dy, dx) = (y - cy, x - cx);
                let theta = dy.atan2(dx);
                let r = radius * (1.0 + harmonics.iter().map(|(a, k, ph)| a * (k * theta + ph).sin()).sum::<f64>());
                (dy * dy + dx * dx).sqrt() <= r
            }
            Shape::Bars {
                cy,
                cx,
                angle,
                offsets,
                half_len,
                half_width,
            } => {
                let (s, c) = angle.sin_cos();
                let (dy, dx) = (y - cy, x - cx);
                let along = dx * c + dy * s;
                let across = -dx * s + dy * c;
                along.abs() <= *half_len && offsets.iter().any(|o| (across - o).abs() <= *half_width)
            }
        }
    }
}

fn random_shape(class: u8, size: f64, cell: f64, rng: &mut RngState) -> Shape {
    let centre = |rng: &mut RngState| (rng.uniform(0.15, 0.85) * size, rng.uniform(0.15, 0.85) * size);
    match class {
        1 | 5 | 6 => {
            let mut p = centre(rng);
            let mut heading = rng.uniform(0.0, TAU);
            let mut points = vec![p];
            for _ in 0..2 + rng.below(3) {
                heading += rng.uniform(-0.7, 0.7);
                let len = rng.uniform(0.15, 0.3) * size;
                p = (p.0 + len * heading.sin(), p.1 + len * heading.cos());
                points.push(p);
            }
            Shape::Polyline {
                points,
                half_width: (0.5 * cell).max(0.02 * size),
            }
        }
        2 | 4 => {
            let (cy, cx) = centre(rng);
            let harmonic = |rng: &mut RngState| (rng.uniform(0.05, 0.2), (2 + rng.below(4)) as f64, rng.uniform(0.0, TAU));
            Shape::Blob {
                cy,
                cx,
                radius: rng.uniform(0.1, 0.18) * size,
                harmonics: [harmonic(rng), harmonic(rng)],
            }
        }
        3 => {
            let (cy, cx) = centre(rng);
            let count = 2 + rng.below(3);
            let spacing = rng.uniform(0.08, 0.11) * size;
            let first = -(count as f64 - 1.0) / 2.0 * spacing;
            let axis = if rng.bernoulli(0.5) { 0.0 } else { PI / 2.0 };
            Shape::Bars {
                cy,
                cx,
                angle: axis + rng.uniform(-0.2, 0.2),
                offsets: (0..count).map(|i| first + i as f64 * spacing).collect(),
                half_len: rng.uniform(0.18, 0.28) * size,
                half_width: (0.5 * cell).max(0.025 * size),
            }
        }
        _ => unreachable!(),
    }
}

/// Generate sample `index`; depends only on (`root`, `index`, `cfg`).
pub fn generate_sample(root: &RngState, index: usize, cfg: &SynthConfig) -> Result<Sample> {
    cfg.validate()?;
    let mut rng = root.split(index as u64);
    let n = cfg.size;
    let cell = cfg.cell;
    let g = n / cell;
    let surface = [Surface::Concrete, Surface::Steel, Surface::Asphalt][rng.below(3)];

    let mut cells = vec![0u8; g * g];
    if !rng.bernoulli(cfg.clean_fraction) {
        let options = surface.damage_classes();
        for _ in 0..1 + rng.below(3) {
            let class = options[rng.below(options.len())];
            let shape = random_shape(class, n as f64, cell as f64, &mut rng);
            for cy in 0..g {
                for cx in 0..g {
                    let (y, x) = ((cy * cell) as f64 + (cell as f64 - 1.0) / 2.0, (cx * cell) as f64 + (cell as f64 - 1.0) / 2.0);
                    if shape.contains(y, x) {
                        cells[cy * g + cx] = class;
                    }
                }
            }
        }
    }
    let mut mask = Mask::zeros(n, n);
    for y in 0..n {
        for x in 0..n {
            mask.data[y * n + x] = cells[(y / cell) * g + x / cell];
        }
    }

    // low-frequency shading shared by all channels, then per-pixel grain
    let (fy, fx) = (rng.uniform(6.0, 14.0), rng.uniform(6.0, 14.0));
    let (py, px) = (rng.uniform(0.0, TAU), rng.uniform(0.0, TAU));
    let amp = rng.uniform(4.0, 10.0);
    let mut noise = rng.split(1);
    let base = surface.base();
    let mut image = vec![0.0f32; 3 * n * n];
    for p in 0..n * n {
        let (y, x) = ((p / n) as f64, (p % n) as f64);
        let shade = amp * ((y / fy + py).sin() + (x / fx + px).cos()) / 2.0;
        let label = mask.data[p];
        let (colour, grain) = if label == 0 { (base, 6.0) } else { appearance(label) };
        let common = grain * noise.standard_normal();
        for c in 0..3 {
            let v = colour[c] + shade + common + 0.4 * grain * noise.standard_normal();
            image[c * n * n + p] = v.round().clamp(0.0, 255.0) as f32;
        }
    }
    Sample::new(format!("{index:04}"), Tensor::new(vec![3, n, n], image)?, mask)
}

pub fn generate_synthetic(n: usize, cfg: &SynthConfig, seed: u64) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let root = RngState::new(seed);
    par::try_map_indices(n, |i| generate_sample(&root, i, cfg))
}
