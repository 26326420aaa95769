//! Segmenter/classifier fusion, confusion matrices and prediction helpers.

mod overlay;

pub use overlay::{render_overlay, LEGEND_HEIGHT, PALETTE};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::resample::resize_bilinear;
use crate::data::{Mask, Normalization, Sample, CLASS_NAMES, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::layers::softmax_per_pixel;
use crate::network::Network;
use crate::par;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Softmax cut-offs for the six damage classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub concrete_crack: f64,
    pub concrete_spall: f64,
    pub exposed_reinforcement: f64,
    pub steel_corrosion: f64,
    pub steel_fatigue_crack: f64,
    pub asphalt_crack: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            concrete_crack: 0.1,
            concrete_spall: 0.4,
            exposed_reinforcement: 0.1,
            steel_corrosion: 0.5,
            steel_fatigue_crack: 0.1,
            asphalt_crack: 0.5,
        }
    }
}

impl Thresholds {
    pub fn uniform(t: f64) -> Self {
        Thresholds::from_array([t; 6])
    }

    /// Thresholds for classes 1..=6 in class order.
    pub fn as_array(&self) -> [f64; 6] {
        [
            self.concrete_crack,
            self.concrete_spall,
            self.exposed_reinforcement,
            self.steel_corrosion,
            self.steel_fatigue_crack,
            self.asphalt_crack,
        ]
    }

    pub fn from_array(t: [f64; 6]) -> Self {
        Thresholds {
            concrete_crack: t[0],
            concrete_spall: t[1],
            exposed_reinforcement: t[2],
            steel_corrosion: t[3],
            steel_fatigue_crack: t[4],
            asphalt_crack: t[5],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub thresholds: Thresholds,
    /// Minimum segmenter damage probability for a pixel to be labelled as damage.
    pub segmenter_threshold: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            thresholds: Thresholds::default(),
            segmenter_threshold: 0.5,
        }
    }
}

impl FusionConfig {
    /// Thresholds must lie in `[0, 1]`; the closed ends allow the argmax and always-veto limits.
    pub fn validate(&self) -> Result<()> {
        let all = self.thresholds.as_array().into_iter().chain([self.segmenter_threshold]);
        for t in all {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("fusion threshold {t} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Fuse one pixel. `class_probs` has the 7 classifier probabilities.
pub fn fuse_pixel(class_probs: &[f64], segmenter_damage: f64, cfg: &FusionConfig) -> u8 {
    if segmenter_damage < cfg.segmenter_threshold {
        return 0;
    }
    let tau = cfg.thresholds.as_array();
    let mut best: Option<(u8, f64)> = None;
    for c in 1..NUM_CLASSES {
        let p = class_probs[c];
        if p >= tau[c - 1] && best.is_none_or(|(_, b)| p > b) {
            best = Some((c as u8, p));
        }
    }
    best.map_or(0, |(c, _)| c)
}

/// Combine `(N, 7, H, W)` classifier and `(N, 2, H, W)` segmenter probabilities into one mask per sample.
pub fn fuse<T: Scalar>(classifier: &Tensor<T>, segmenter: &Tensor<T>, cfg: &FusionConfig) -> Result<Vec<Mask>> {
    cfg.validate()?;
    let c = classifier.dims4()?;
    let s = segmenter.dims4()?;
    if c.c != NUM_CLASSES || s.c != 2 || (c.n, c.h, c.w) != (s.n, s.h, s.w) {
        return Err(Error::shape(classifier.shape(), segmenter.shape()));
    }
    let plane = c.plane();
    Ok((0..c.n)
        .map(|n| {
            let cls = classifier.sample(n);
            let seg = segmenter.sample(n);
            let mut probs = [0.0f64; NUM_CLASSES];
            let data = (0..plane)
                .map(|p| {
                    for (k, v) in probs.iter_mut().enumerate() {
                        *v = cls[k * plane + p].to_f64_lossy();
                    }
                    fuse_pixel(&probs, seg[plane + p].to_f64_lossy(), cfg)
                })
                .collect();
            Mask { h: c.h, w: c.w, data }
        })
        .collect())
}

/// Per-pixel argmax over channels of an `(N, C, H, W)` tensor; ties go to the lowest class.
pub fn argmax_masks<T: Scalar>(scores: &Tensor<T>) -> Result<Vec<Mask>> {
    let d = scores.dims4()?;
    let plane = d.plane();
    Ok((0..d.n)
        .map(|n| {
            let s = scores.sample(n);
            let data = (0..plane)
                .map(|p| {
                    let mut best = 0;
                    for k in 1..d.c {
                        if s[k * plane + p] > s[best * plane + p] {
                            best = k;
                        }
                    }
                    best as u8
                })
                .collect();
            Mask { h: d.h, w: d.w, data }
        })
        .collect())
}

/// Rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn add_masks(&mut self, truth: &Mask, predicted: &Mask) -> Result<()> {
        if (truth.h, truth.w) != (predicted.h, predicted.w) {
            return Err(Error::shape(&[truth.h, truth.w], &[predicted.h, predicted.w]));
        }
        for (name, m) in [("true", truth), ("predicted", predicted)] {
            if let Some((r, c, v)) = m.first_invalid(self.classes) {
                return Err(Error::Data(format!(
                    "{name} label {v} at ({r}, {c}) is not below {} classes",
                    self.classes
                )));
            }
        }
        for (&t, &p) in truth.data.iter().zip(&predicted.data) {
            self.counts[t as usize][p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::InvalidArgument("confusion matrices differ in size".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_total(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn overall_accuracy(&self) -> f64 {
        let trace: u64 = (0..self.classes).map(|c| self.counts[c][c]).sum();
        trace as f64 / self.total().max(1) as f64
    }

    /// Recall per true class; `None` for classes absent from the ground truth.
    pub fn per_class_accuracy(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let row = self.row_total(c);
                (row > 0).then(|| self.counts[c][c] as f64 / row as f64)
            })
            .collect()
    }

    /// Percent of all evaluated pixels in each cell.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        let total = self.total().max(1) as f64;
        self.counts
            .iter()
            .map(|r| r.iter().map(|&v| 100.0 * v as f64 / total).collect())
            .collect()
    }

    /// Percent of each true class's pixels.
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|r| {
                let total = r.iter().sum::<u64>().max(1) as f64;
                r.iter().map(|&v| 100.0 * v as f64 / total).collect()
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub samples: usize,
    pub pixels: u64,
    pub overall_accuracy: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub counts: Vec<Vec<u64>>,
    /// Percent of all pixels.
    pub normalized: Vec<Vec<f64>>,
    /// Percent of each true class.
    pub row_normalized: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fusion: Option<FusionConfig>,
}

pub fn evaluate(predicted: &[Mask], truth: &[Mask], classes: usize) -> Result<EvalReport> {
    if predicted.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} ground-truth masks",
            predicted.len(),
            truth.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (p, t) in predicted.iter().zip(truth) {
        cm.add_masks(t, p)?;
    }
    Ok(report(&cm, predicted.len(), None))
}

pub fn report(cm: &ConfusionMatrix, samples: usize, fusion: Option<FusionConfig>) -> EvalReport {
    let class_names = if cm.classes == NUM_CLASSES {
        CLASS_NAMES.iter().map(|s| s.to_string()).collect()
    } else if cm.classes == 2 {
        vec!["no damage".into(), "damage".into()]
    } else {
        (0..cm.classes).map(|c| format!("class {c}")).collect()
    };
    EvalReport {
        class_names,
        samples,
        pixels: cm.total(),
        overall_accuracy: cm.overall_accuracy(),
        per_class_accuracy: cm.per_class_accuracy(),
        counts: cm.counts.clone(),
        normalized: cm.normalized(),
        row_normalized: cm.row_normalized(),
        fusion,
    }
}

/// Best pixel accuracy reachable by any prediction that is constant on
/// `factor x factor` blocks, which is what a head on a `factor`-pooled grid produces.
pub fn block_ceiling(masks: &[Mask], factor: usize, classes: usize) -> f64 {
    let mut hit = 0u64;
    let mut total = 0u64;
    for m in masks {
        for by in (0..m.h).step_by(factor) {
            for bx in (0..m.w).step_by(factor) {
                let mut hist = vec![0u64; classes];
                for y in by..(by + factor).min(m.h) {
                    for x in bx..(bx + factor).min(m.w) {
                        hist[m.get(y, x) as usize] += 1;
                    }
                }
                hit += hist.iter().max().copied().unwrap_or(0);
                total += hist.iter().sum::<u64>();
            }
        }
    }
    hit as f64 / total.max(1) as f64
}

/// Class probabilities `(C, H, W)` for one `(3, H, W)` image on the 0-255 scale.
///
/// Images whose side is not `work_size` are resized to it, and the
/// probabilities are resized back with bilinear interpolation.
pub fn predict_proba(ckpt: &Checkpoint, image: &Tensor<f32>, work_size: usize) -> Result<Tensor<f32>> {
    let [3, h, w] = image.shape()[..] else {
        return Err(Error::invalid_shape(image.shape(), "expected a (3, H, W) image"));
    };
    let resized = (h, w) != (work_size, work_size);
    let input = if resized {
        resize_bilinear(image, work_size, work_size)?
    } else {
        image.clone()
    };
    let batch = input.reshape(&[1, 3, work_size, work_size])?;
    let probs = softmax_per_pixel(&ckpt.network.forward(&ckpt.normalization.apply(&batch)?)?)?;
    let c = probs.shape()[1];
    let probs = probs.reshape(&[c, work_size, work_size])?;
    if resized {
        resize_bilinear(&probs, h, w)
    } else {
        Ok(probs)
    }
}

/// Argmax labels of a single network for each sample, at the sample's own size.
pub fn predict_masks(network: &Network<f32>, normalization: &Normalization, samples: &[Sample]) -> Result<Vec<Mask>> {
    samples
        .iter()
        .map(|s| {
            let (h, w) = s.size();
            let x = s.image.clone().reshape(&[1, 3, h, w])?;
            let logits = network.forward(&normalization.apply(&x)?)?;
            Ok(argmax_masks(&logits)?.remove(0))
        })
        .collect()
}

/// Single-network evaluation against the samples' own masks.
pub fn evaluate_network(network: &Network<f32>, normalization: &Normalization, samples: &[Sample]) -> Result<EvalReport> {
    let predicted = predict_masks(network, normalization, samples)?;
    let truth: Vec<Mask> = samples.iter().map(|s| s.mask.clone()).collect();
    evaluate(&predicted, &truth, network.num_classes())
}

/// Fused prediction for one image from a segmenter and a classifier checkpoint.
pub fn predict_fused(
    segmenter: &Checkpoint,
    classifier: &Checkpoint,
    image: &Tensor<f32>,
    work_size: usize,
    cfg: &FusionConfig,
) -> Result<Mask> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let seg = predict_proba(segmenter, image, work_size)?.reshape(&[1, 2, h, w])?;
    let cls = predict_proba(classifier, image, work_size)?.reshape(&[1, NUM_CLASSES, h, w])?;
    Ok(fuse(&cls, &seg, cfg)?.remove(0))
}

/// Fused predictions for a dataset, scored against its masks.
pub fn evaluate_fused(
    segmenter: &Checkpoint,
    classifier: &Checkpoint,
    samples: &[Sample],
    cfg: &FusionConfig,
) -> Result<EvalReport> {
    check_roles(segmenter, classifier)?;
    let predicted = par::try_map_indices(samples.len(), |i| {
        let s = &samples[i];
        predict_fused(segmenter, classifier, &s.image, s.size().0, cfg)
    })?;
    let truth: Vec<Mask> = samples.iter().map(|s| s.mask.clone()).collect();
    let mut r = evaluate(&predicted, &truth, NUM_CLASSES)?;
    r.fusion = Some(cfg.clone());
    Ok(r)
}

pub fn check_roles(segmenter: &Checkpoint, classifier: &Checkpoint) -> Result<()> {
    use crate::arch::Role;
    if segmenter.role() != Role::Segmenter || classifier.role() != Role::Classifier {
        return Err(Error::InvalidArgument(format!(
            "expected a segmenter and a classifier checkpoint, got {} and {}",
            segmenter.role(),
            classifier.role()
        )));
    }
    Ok(())
}
