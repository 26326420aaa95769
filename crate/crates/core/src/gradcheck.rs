//! Finite-difference checks of every layer's backward pass in 64-bit floats.
//!
//! Each trial draws a random small problem, reduces the op's output to a
//! scalar `L = sum r * y` with a random `r`, and compares the analytic gradient
//! of every input against central differences.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::layers::{
    batchnorm, batchnorm_backward, conv2d, conv2d_backward, dense_per_pixel, dense_per_pixel_backward, dropout,
    dropout_backward, maxpool2, maxpool2_backward, residual_add, residual_add_backward, BatchNormParams, ConvParams,
    DenseParams, LayerMode,
};
use crate::loss::{l2_penalty, softmax_cross_entropy};
use crate::rng::RngState;
use crate::tensor::{upsample, upsample_backward, Tensor};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_TRIALS: usize = 100;
/// Gradients smaller than this are compared on an absolute scale.
pub const FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GradOp {
    Conv2d,
    Maxpool2,
    Batchnorm,
    Dropout,
    DensePerPixel,
    ResidualAdd,
    SoftmaxCrossEntropy,
    Upsample,
}

impl GradOp {
    pub const ALL: [GradOp; 8] = [
        GradOp::Conv2d,
        GradOp::Maxpool2,
        GradOp::Batchnorm,
        GradOp::Dropout,
        GradOp::DensePerPixel,
        GradOp::ResidualAdd,
        GradOp::SoftmaxCrossEntropy,
        GradOp::Upsample,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradOp::Conv2d => "conv2d",
            GradOp::Maxpool2 => "maxpool2",
            GradOp::Batchnorm => "batchnorm",
            GradOp::Dropout => "dropout",
            GradOp::DensePerPixel => "dense_per_pixel",
            GradOp::ResidualAdd => "residual_add",
            GradOp::SoftmaxCrossEntropy => "softmax_cross_entropy",
            GradOp::Upsample => "upsample",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct OpReport {
    pub op: GradOp,
    pub trials: usize,
    /// Worst relative error over every checked element of every trial.
    pub max_rel_error: f64,
    pub worst_trial: usize,
    pub elements: usize,
    pub passed: bool,
}

type LossFn = Box<dyn Fn(&[Tensor<f64>]) -> Result<f64>>;

struct Case {
    inputs: Vec<Tensor<f64>>,
    loss: LossFn,
    grads: Vec<Tensor<f64>>,
}

/// `|a - n| / max(|a|, |n|, FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Central difference of `loss` with respect to every element of every input.
pub fn numeric_gradients(
    inputs: &[Tensor<f64>],
    loss: impl Fn(&[Tensor<f64>]) -> Result<f64>,
    step: f64,
) -> Result<Vec<Tensor<f64>>> {
    let mut probe = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = Tensor::zeros_like(&inputs[k]);
        for e in 0..inputs[k].len() {
            let orig = inputs[k].data()[e];
            probe[k].data_mut()[e] = orig + step;
            let lp = loss(&probe)?;
            probe[k].data_mut()[e] = orig - step;
            let lm = loss(&probe)?;
            probe[k].data_mut()[e] = orig;
            g.data_mut()[e] = (lp - lm) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

fn normal(rng: &mut RngState, shape: &[usize]) -> Result<Tensor<f64>> {
    Tensor::from_fn(shape, |_| rng.standard_normal())
}

fn dim(rng: &mut RngState, lo: usize) -> usize {
    lo + rng.below(5 - lo)
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    a.expect_same_shape(b)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum())
}

fn build(op: GradOp, rng: &mut RngState) -> Result<Case> {
    let n = dim(rng, 1);
    let c = dim(rng, 1);
    let (h, w) = (dim(rng, 1), dim(rng, 1));
    Ok(match op {
        GradOp::Conv2d => {
            let oc = dim(rng, 1);
            let k = [1, 3][rng.below(2)];
            let x = normal(rng, &[n, c, h, w])?;
            let p = ConvParams::new(normal(rng, &[oc, c, k, k])?, normal(rng, &[oc])?)?;
            let r = normal(rng, &[n, oc, h, w])?;
            let g = conv2d_backward(&x, &p, &r, true)?;
            let grads = vec![g.input.expect("input gradient requested"), g.weight, g.bias];
            Case {
                inputs: vec![x, p.weight, p.bias],
                loss: Box::new(move |t| dot(&conv2d(&t[0], &ConvParams::new(t[1].clone(), t[2].clone())?)?, &r)),
                grads,
            }
        }
        GradOp::Maxpool2 => {
            let (h, w) = (2 * (1 + rng.below(2)), 2 * (1 + rng.below(2)));
            // distinct values at least 0.01 apart so no window is within a step of a tie
            let len = n * c * h * w;
            let mut order: Vec<usize> = (0..len).collect();
            rng.shuffle(&mut order);
            let x = Tensor::new(vec![n, c, h, w], order.iter().map(|&i| 0.01 * i as f64 - 0.5).collect())?;
            let (y, idx) = maxpool2(&x)?;
            let r = normal(rng, y.shape())?;
            let grads = vec![maxpool2_backward(&r, &idx)?];
            Case {
                inputs: vec![x],
                loss: Box::new(move |t| dot(&maxpool2(&t[0])?.0, &r)),
                grads,
            }
        }
        GradOp::Batchnorm => {
            let (n, h) = (dim(rng, 2), dim(rng, 2));
            let x = normal(rng, &[n, c, h, w])?;
            let mut p = BatchNormParams::new(c)?;
            p.gamma = Tensor::from_fn(&[c], |_| rng.uniform(0.5, 1.5))?;
            p.beta = normal(rng, &[c])?;
            let out = batchnorm(&x, &p, LayerMode::Train)?;
            let r = normal(rng, out.output.shape())?;
            let g = batchnorm_backward(&r, &p, &out.cache)?;
            let grads = vec![g.input, g.gamma, g.beta];
            let base = p.clone();
            Case {
                inputs: vec![x, p.gamma, p.beta],
                loss: Box::new(move |t| {
                    let mut p = base.clone();
                    p.gamma = t[1].clone();
                    p.beta = t[2].clone();
                    dot(&batchnorm(&t[0], &p, LayerMode::Train)?.output, &r)
                }),
                grads,
            }
        }
        GradOp::Dropout => {
            let x = normal(rng, &[n, c, h, w])?;
            let keep = rng.uniform(0.3, 0.9);
            let key = rng.split(1);
            let (y, mask) = dropout(&x, keep, LayerMode::Train, &mut key.clone())?;
            let r = normal(rng, y.shape())?;
            let grads = vec![dropout_backward(&r, mask.as_ref())?];
            Case {
                inputs: vec![x],
                // the same key reproduces the same mask for every probe
                loss: Box::new(move |t| dot(&dropout(&t[0], keep, LayerMode::Train, &mut key.clone())?.0, &r)),
                grads,
            }
        }
        GradOp::DensePerPixel => {
            let od = dim(rng, 1);
            let x = normal(rng, &[n, c, h, w])?;
            let p = DenseParams::new(normal(rng, &[od, c])?, normal(rng, &[od])?)?;
            let r = normal(rng, &[n, od, h, w])?;
            let g = dense_per_pixel_backward(&x, &p, &r)?;
            let grads = vec![g.input, g.weight, g.bias];
            Case {
                inputs: vec![x, p.weight, p.bias],
                loss: Box::new(move |t| {
                    dot(&dense_per_pixel(&t[0], &DenseParams::new(t[1].clone(), t[2].clone())?)?, &r)
                }),
                grads,
            }
        }
        GradOp::ResidualAdd => {
            let cs = 1 + rng.below(c);
            let x = normal(rng, &[n, c, h, w])?;
            let s = normal(rng, &[n, cs, h, w])?;
            let r = normal(rng, &[n, c, h, w])?;
            let grads = vec![r.clone(), residual_add_backward(&r, cs)?];
            Case {
                inputs: vec![x, s],
                loss: Box::new(move |t| dot(&residual_add(&t[0], &t[1])?, &r)),
                grads,
            }
        }
        GradOp::SoftmaxCrossEntropy => {
            // weighted cross-entropy plus the L2 term on one weight tensor
            let classes = dim(rng, 2);
            let logits = normal(rng, &[n, classes, h, w])?;
            let weight = normal(rng, &[c, classes])?;
            let labels: Vec<u8> = (0..n * h * w).map(|_| rng.below(classes) as u8).collect();
            let cw: Vec<f64> = (0..classes).map(|_| rng.uniform(0.5, 2.0)).collect();
            let lambda = rng.uniform(1e-3, 1e-1);
            let out = softmax_cross_entropy(&logits, &labels, &cw)?;
            let mut gw = Tensor::zeros_like(&weight);
            l2_penalty(lambda, &[&weight], Some(&mut [&mut gw]));
            Case {
                inputs: vec![logits, weight],
                loss: Box::new(move |t| {
                    Ok(softmax_cross_entropy(&t[0], &labels, &cw)?.loss + l2_penalty::<f64>(lambda, &[&t[1]], None))
                }),
                grads: vec![out.grad, gw],
            }
        }
        GradOp::Upsample => {
            let f = 2 + rng.below(2);
            let x = normal(rng, &[n, c, h, w])?;
            let r = normal(rng, &[n, c, h * f, w * f])?;
            let grads = vec![upsample_backward(&r, f)?];
            Case {
                inputs: vec![x],
                loss: Box::new(move |t| dot(&upsample(&t[0], f)?, &r)),
                grads,
            }
        }
    })
}

/// Run `trials` random problems for one op.
pub fn check_op(op: GradOp, trials: usize, rng: RngState) -> Result<OpReport> {
    if trials == 0 {
        return Err(Error::InvalidArgument("at least one trial is required".into()));
    }
    let mut report = OpReport {
        op,
        trials,
        max_rel_error: 0.0,
        worst_trial: 0,
        elements: 0,
        passed: true,
    };
    for t in 0..trials {
        let case = build(op, &mut rng.split(t as u64))?;
        let numeric = numeric_gradients(&case.inputs, &case.loss, STEP)?;
        for (a, g) in case.grads.iter().zip(&numeric) {
            a.expect_same_shape(g)?;
            for (&av, &nv) in a.data().iter().zip(g.data()) {
                let e = relative_error(av, nv);
                report.elements += 1;
                if !(e <= report.max_rel_error) {
                    report.max_rel_error = e;
                    report.worst_trial = t;
                }
            }
        }
    }
    report.passed = report.max_rel_error < TOLERANCE;
    Ok(report)
}

/// Every op in [`GradOp::ALL`], each on its own stream of `seed`.
pub fn run_suite(trials: usize, seed: u64) -> Result<Vec<OpReport>> {
    let root = RngState::new(seed);
    GradOp::ALL
        .iter()
        .enumerate()
        .map(|(i, &op)| check_op(op, trials, root.split(i as u64)))
        .collect()
}
