//! Class-balanced pixel-wise cross-entropy with L2 weight decay.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub class_weights: Vec<f64>,
}

impl LossConfig {
    pub fn unweighted(classes: usize, lambda: f64) -> Self {
        LossConfig {
            lambda,
            class_weights: vec![1.0; classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda {} must be >= 0", self.lambda)));
        }
        if self.class_weights.len() < 2 {
            return Err(Error::Config("need weights for at least 2 classes".into()));
        }
        if let Some(w) = self.class_weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
            return Err(Error::Config(format!("class weight {w} must be finite and >= 0")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassBalance {
    pub weights: Vec<f64>,
    pub frequencies: Vec<f64>,
    /// Classes with no pixels; their weight is 0.
    pub absent: Vec<usize>,
}

/// Median frequency balancing: `w_c = median(f) / f_c` over the classes present.
pub fn class_balance_weights(pixel_counts: &[u64]) -> Result<ClassBalance> {
    let total: u64 = pixel_counts.iter().sum();
    if total == 0 {
        return Err(Error::Data("cannot balance classes: no labelled pixels".into()));
    }
    let frequencies: Vec<f64> = pixel_counts.iter().map(|&c| c as f64 / total as f64).collect();
    let mut present: Vec<f64> = frequencies.iter().copied().filter(|&f| f > 0.0).collect();
    present.sort_by(f64::total_cmp);
    let m = present.len();
    let median = if m % 2 == 1 {
        present[m / 2]
    } else {
        0.5 * (present[m / 2 - 1] + present[m / 2])
    };
    let absent: Vec<usize> = (0..pixel_counts.len()).filter(|&c| pixel_counts[c] == 0).collect();
    for &c in &absent {
        warn!("class {c} has no pixels in the training set; its loss weight is set to 0");
    }
    let weights = frequencies
        .iter()
        .map(|&f| if f > 0.0 { median / f } else { 0.0 })
        .collect();
    Ok(ClassBalance {
        weights,
        frequencies,
        absent,
    })
}

/// Validate `labels` (length `n*h*w`) against `classes`.
pub fn check_labels(labels: &[u8], dims: (usize, usize, usize), classes: usize) -> Result<()> {
    let (n, h, w) = dims;
    if labels.len() != n * h * w {
        return Err(Error::shape(&[labels.len()], &[n, h, w]));
    }
    if let Some(i) = labels.iter().position(|&l| l as usize >= classes) {
        return Err(Error::LabelOutOfRange {
            label: labels[i],
            classes,
            sample: i / (h * w),
            row: (i / w) % h,
            col: i % w,
        });
    }
    Ok(())
}

/// Fused softmax cross-entropy over a block of pixels.
///
/// `logits` is class-major, `logits[c * p + j]` for pixel `j` of `p`. Writes
/// `scale * w_y * (softmax - onehot)` into `grad` and returns
/// (`sum_j w_y * -ln softmax_y`, number of pixels whose argmax equals the label).
pub fn cross_entropy_block<T: Scalar>(
    logits: &[T],
    labels: &[u8],
    weights: &[T],
    scale: T,
    mut grad: Option<&mut [T]>,
) -> (f64, usize) {
    let (classes, p) = (weights.len(), labels.len());
    debug_assert_eq!(logits.len(), classes * p);
    let mut loss = 0.0f64;
    let mut correct = 0usize;
    for j in 0..p {
        let y = labels[j] as usize;
        let mut best = 0;
        let mut max = logits[j];
        for c in 1..classes {
            let v = logits[c * p + j];
            if v > max {
                max = v;
                best = c;
            }
        }
        if best == y {
            correct += 1;
        }
        let mut total = T::zero();
        for c in 0..classes {
            total = total + (logits[c * p + j] - max).exp();
        }
        let log_total = total.ln();
        let wy = weights[y];
        loss += (wy * (log_total - (logits[y * p + j] - max))).to_f64_lossy();
        if let Some(g) = grad.as_deref_mut() {
            for c in 0..classes {
                let prob = (logits[c * p + j] - max - log_total).exp();
                let target = if c == y { T::one() } else { T::zero() };
                g[c * p + j] = scale * wy * (prob - target);
            }
        }
    }
    (loss, correct)
}

/// [`cross_entropy_block`] for cells whose pixels share one set of logits.
///
/// `counts[j * classes + c]` is the number of pixels of class `c` in cell `j`.
/// The result equals expanding every cell into its pixels and calling
/// [`cross_entropy_block`]; the gradient is summed over each cell's pixels.
pub fn cross_entropy_counts<T: Scalar>(
    logits: &[T],
    counts: &[u32],
    weights: &[T],
    scale: T,
    mut grad: Option<&mut [T]>,
) -> (f64, usize) {
    let classes = weights.len();
    let p = counts.len() / classes;
    debug_assert_eq!(logits.len(), classes * p);
    let mut loss = 0.0f64;
    let mut correct = 0usize;
    for j in 0..p {
        let cnt = &counts[j * classes..(j + 1) * classes];
        let mut best = 0;
        let mut max = logits[j];
        for c in 1..classes {
            let v = logits[c * p + j];
            if v > max {
                max = v;
                best = c;
            }
        }
        correct += cnt[best] as usize;
        let mut total = T::zero();
        for c in 0..classes {
            total = total + (logits[c * p + j] - max).exp();
        }
        let log_total = total.ln();
        let mut mass = T::zero();
        for c in 0..classes {
            if cnt[c] > 0 {
                let wc = weights[c] * T::from_f64_lossy(cnt[c] as f64);
                mass = mass + wc;
                loss += (wc * (log_total - (logits[c * p + j] - max))).to_f64_lossy();
            }
        }
        if let Some(g) = grad.as_deref_mut() {
            for c in 0..classes {
                let prob = (logits[c * p + j] - max - log_total).exp();
                let target = weights[c] * T::from_f64_lossy(cnt[c] as f64);
                g[c * p + j] = scale * (mass * prob - target);
            }
        }
    }
    (loss, correct)
}

#[derive(Clone, Debug)]
pub struct LossOutput<T = f32> {
    /// Weighted cross-entropy, averaged over all pixels.
    pub loss: f64,
    pub correct: usize,
    /// Gradient with respect to the logits.
    pub grad: Tensor<T>,
}

/// Weighted cross-entropy of `softmax(logits)`, mean over every pixel of the batch.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[u8], weights: &[f64]) -> Result<LossOutput<T>> {
    let d = logits.dims4()?;
    if d.c != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} class weights for {} logit channels",
            weights.len(),
            d.c
        )));
    }
    check_labels(labels, (d.n, d.h, d.w), d.c)?;
    let hw = d.plane();
    let scale = T::from_f64_lossy(1.0 / (d.n * hw) as f64);
    let w: Vec<T> = weights.iter().map(|&v| T::from_f64_lossy(v)).collect();
    let parts: Vec<(f64, usize, Vec<T>)> = par::map_indices(d.n, |n| {
        let mut g = vec![T::zero(); d.sample()];
        let (l, c) = cross_entropy_block(logits.sample(n), &labels[n * hw..(n + 1) * hw], &w, scale, Some(&mut g));
        (l, c, g)
    });
    let mut sum = 0.0;
    let mut correct = 0;
    let mut data = Vec::with_capacity(logits.len());
    for (l, c, g) in parts {
        sum += l;
        correct += c;
        data.extend(g);
    }
    let grad = Tensor::new(logits.shape().to_vec(), data)?;
    Ok(LossOutput {
        loss: sum / (d.n * hw) as f64,
        correct,
        grad,
    })
}

/// The same quantity computed literally from probabilities: `-(1/Npix) sum w_y ln p_y`.
pub fn cross_entropy_from_probs<T: Scalar>(probs: &Tensor<T>, labels: &[u8], weights: &[f64]) -> Result<f64> {
    let d = probs.dims4()?;
    check_labels(labels, (d.n, d.h, d.w), d.c)?;
    let hw = d.plane();
    let mut sum = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let (n, p) = (i / hw, i % hw);
        let prob = probs.sample(n)[y as usize * hw + p].to_f64_lossy();
        sum -= weights[y as usize] * prob.ln();
    }
    Ok(sum / labels.len() as f64)
}

/// `lambda * sum ||W||^2`; adds `2 * lambda * W` to each gradient when given.
pub fn l2_penalty<T: Scalar>(lambda: f64, weights: &[&Tensor<T>], grads: Option<&mut [&mut Tensor<T>]>) -> f64 {
    let penalty = lambda * weights.iter().map(|w| w.sum_squares()).sum::<f64>();
    if let Some(grads) = grads {
        let two_l = T::from_f64_lossy(2.0 * lambda);
        for (g, w) in grads.iter_mut().zip(weights) {
            for (gv, &wv) in g.data_mut().iter_mut().zip(w.data()) {
                *gv = *gv + two_l * wv;
            }
        }
    }
    penalty
}
