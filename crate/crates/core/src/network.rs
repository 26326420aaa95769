//! Parameters and forward/backward passes for a built [`NetworkSpec`].
//!
//! The trunk runs once per pyramid level with shared weights. The head's
//! first dense layer is evaluated on the coarse trunk grid (see
//! [`crate::multiscale::fused_dense_coarse`]). The remaining head layers run
//! per pixel. At eval time they also run on the coarse grid, because every
//! pool block sees identical features. In training, dropout masks differ per
//! pixel, so they run at full resolution in fixed-size pixel tiles, with the
//! loss fused in.

use serde::{Deserialize, Serialize};

use crate::arch::{count_parameters, Arch, LayerKind, NetworkSpec, Role};
use crate::error::{Error, Result};
use crate::layers::{
    batchnorm, batchnorm_backward, conv2d, conv2d_backward, dense_per_pixel, maxpool2, maxpool2_backward,
    residual_add, residual_add_backward, softmax_per_pixel, BatchNormCache, BatchNormParams, BatchStats,
    ConvParams, DenseParams, LayerMode, PoolIndices, BN_EPSILON, BN_MOMENTUM,
};
use crate::loss::{check_labels, cross_entropy_counts, l2_penalty};
use crate::multiscale::{build_pyramid, fused_dense_coarse, fused_dense_coarse_backward, NUM_SCALES, SCALE_FACTORS};
use crate::par;
use crate::rng::{Distribution, RngState};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::{relu, relu_backward, upsample, Tensor};

/// Pixels per head tile during training.
const HEAD_TILE: usize = 1024;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock<T = f32> {
    pub name: String,
    pub conv: ConvParams<T>,
    pub bn: BatchNormParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseBlock<T = f32> {
    pub name: String,
    pub params: DenseParams<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
    DenseWeight,
    DenseBias,
}

impl ParamKind {
    pub fn learnable(self) -> bool {
        !matches!(self, ParamKind::BnRunningMean | ParamKind::BnRunningVar)
    }

    /// Only conv and dense weight tensors carry L2 decay.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::ConvWeight | ParamKind::DenseWeight)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum TrunkStep {
    Conv { block: usize, shortcut: Option<usize> },
    Pool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum HeadStep {
    Dense(usize),
    Dropout { keep: f64, ordinal: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T = f32> {
    spec: NetworkSpec,
    pub convs: Vec<ConvBlock<T>>,
    pub dense: Vec<DenseBlock<T>>,
    trunk_plan: Vec<TrunkStep>,
    /// Head steps after the first dense layer.
    head_plan: Vec<HeadStep>,
}

/// Result of one training forward/backward pass over a batch.
#[derive(Clone, Debug)]
pub struct StepOutput<T = f32> {
    /// Cross-entropy plus L2 term.
    pub loss: f64,
    pub cross_entropy: f64,
    pub correct: usize,
    pub pixels: usize,
    /// Gradients in [`Network::learnable`] order; empty for forward-only passes.
    pub grads: Vec<Tensor<T>>,
    /// Batch statistics per scale, per conv block.
    pub stats: Vec<Vec<BatchStats>>,
}

struct TrunkCache<T> {
    /// `acts[0]` is the input; `acts[i + 1]` is the output of step `i`.
    acts: Vec<Tensor<T>>,
    bn: Vec<Option<BatchNormCache<T>>>,
    pools: Vec<Option<PoolIndices>>,
    stats: Vec<BatchStats>,
}

#[derive(Clone, Debug)]
struct ConvBlockGrads<T> {
    weight: Tensor<T>,
    bias: Tensor<T>,
    gamma: Tensor<T>,
    beta: Tensor<T>,
}

impl<T: Scalar> ConvBlockGrads<T> {
    fn add(&mut self, o: &Self) -> Result<()> {
        self.weight.add_assign(&o.weight)?;
        self.bias.add_assign(&o.bias)?;
        self.gamma.add_assign(&o.gamma)?;
        self.beta.add_assign(&o.beta)
    }
}

fn he_normal<T: Scalar>(rng: &mut RngState, shape: &[usize], fan_in: usize) -> Result<Tensor<T>> {
    rng.draw(
        Distribution::Normal {
            mean: 0.0,
            std: (2.0 / fan_in as f64).sqrt(),
        },
        shape,
    )
}

impl<T: Scalar> Network<T> {
    /// He-normal weights, zero biases, batch norm at gamma 1 / beta 0.
    pub fn init(spec: NetworkSpec, rng: &mut RngState) -> Result<Self> {
        Self::build(spec, Some(rng))
    }

    /// All-zero weights; used as a target for loading stored tensors.
    pub fn zeros(spec: NetworkSpec) -> Result<Self> {
        Self::build(spec, None)
    }

    fn build(spec: NetworkSpec, mut rng: Option<&mut RngState>) -> Result<Self> {
        spec.validate()?;
        let mut convs = Vec::new();
        let mut dense = Vec::new();
        let mut trunk_plan = Vec::new();
        let mut head_plan = Vec::new();
        let mut channels = spec.input_channels;
        let mut features = NUM_SCALES * spec.trunk_channels;
        let mut ordinal = 0u64;
        let mut step_of = std::collections::HashMap::new();
        for l in &spec.layers {
            match &l.kind {
                LayerKind::Conv {
                    kh,
                    kw,
                    out_channels,
                    residual_from,
                } => {
                    let shape = [*out_channels, channels, *kh, *kw];
                    let weight = match rng.as_deref_mut() {
                        Some(r) => he_normal(r, &shape, kh * kw * channels)?,
                        None => Tensor::zeros(&shape)?,
                    };
                    convs.push(ConvBlock {
                        name: l.name.clone(),
                        conv: ConvParams::new(weight, Tensor::zeros(&[*out_channels])?)?,
                        bn: BatchNormParams::new(*out_channels)?,
                    });
                    let shortcut = residual_from.as_ref().map(|s| step_of[s.as_str()] + 1);
                    step_of.insert(l.name.as_str(), trunk_plan.len());
                    trunk_plan.push(TrunkStep::Conv {
                        block: convs.len() - 1,
                        shortcut,
                    });
                    channels = *out_channels;
                }
                LayerKind::Maxpool => {
                    step_of.insert(l.name.as_str(), trunk_plan.len());
                    trunk_plan.push(TrunkStep::Pool);
                }
                LayerKind::Dense { width } => {
                    let shape = [*width, features];
                    let weight = match rng.as_deref_mut() {
                        Some(r) => he_normal(r, &shape, features)?,
                        None => Tensor::zeros(&shape)?,
                    };
                    dense.push(DenseBlock {
                        name: l.name.clone(),
                        params: DenseParams::new(weight, Tensor::zeros(&[*width])?)?,
                    });
                    if dense.len() > 1 {
                        head_plan.push(HeadStep::Dense(dense.len() - 1));
                    }
                    features = *width;
                }
                LayerKind::Dropout { keep_prob } => {
                    head_plan.push(HeadStep::Dropout {
                        keep: *keep_prob,
                        ordinal,
                    });
                    ordinal += 1;
                }
            }
        }
        Ok(Network {
            spec,
            convs,
            dense,
            trunk_plan,
            head_plan,
        })
    }

    /// Batch-norm running-average momentum and epsilon, applied to every block.
    pub fn set_batchnorm(&mut self, momentum: f64, epsilon: f64) -> Result<()> {
        for c in &mut self.convs {
            c.bn.momentum = momentum;
            c.bn.epsilon = epsilon;
            c.bn.validate()?;
        }
        Ok(())
    }

    /// `(momentum, epsilon)` shared by the batch-norm blocks.
    pub fn batchnorm_settings(&self) -> (f64, f64) {
        self.convs
            .first()
            .map_or((BN_MOMENTUM, BN_EPSILON), |c| (c.bn.momentum, c.bn.epsilon))
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes()
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let bn = |b: &BatchNormParams<T>| BatchNormParams {
            gamma: b.gamma.cast(),
            beta: b.beta.cast(),
            running_mean: b.running_mean.cast(),
            running_var: b.running_var.cast(),
            momentum: b.momentum,
            epsilon: b.epsilon,
        };
        Network {
            spec: self.spec.clone(),
            convs: self
                .convs
                .iter()
                .map(|c| ConvBlock {
                    name: c.name.clone(),
                    conv: ConvParams {
                        weight: c.conv.weight.cast(),
                        bias: c.conv.bias.cast(),
                    },
                    bn: bn(&c.bn),
                })
                .collect(),
            dense: self
                .dense
                .iter()
                .map(|d| DenseBlock {
                    name: d.name.clone(),
                    params: DenseParams {
                        weight: d.params.weight.cast(),
                        bias: d.params.bias.cast(),
                    },
                })
                .collect(),
            trunk_plan: self.trunk_plan.clone(),
            head_plan: self.head_plan.clone(),
        }
    }

    /// Every stored tensor with its name and kind: learnable parameters and batch-norm running statistics.
    pub fn named_tensors(&self) -> Vec<(String, ParamKind, &Tensor<T>)> {
        let mut out = Vec::new();
        for c in &self.convs {
            out.push((format!("{}.weight", c.name), ParamKind::ConvWeight, &c.conv.weight));
            out.push((format!("{}.bias", c.name), ParamKind::ConvBias, &c.conv.bias));
            out.push((format!("{}.bn.gamma", c.name), ParamKind::BnGamma, &c.bn.gamma));
            out.push((format!("{}.bn.beta", c.name), ParamKind::BnBeta, &c.bn.beta));
            out.push((format!("{}.bn.running_mean", c.name), ParamKind::BnRunningMean, &c.bn.running_mean));
            out.push((format!("{}.bn.running_var", c.name), ParamKind::BnRunningVar, &c.bn.running_var));
        }
        for d in &self.dense {
            out.push((format!("{}.weight", d.name), ParamKind::DenseWeight, &d.params.weight));
            out.push((format!("{}.bias", d.name), ParamKind::DenseBias, &d.params.bias));
        }
        out
    }

    /// Mutable view in [`Network::named_tensors`] order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.conv.weight);
            out.push(&mut c.conv.bias);
            out.push(&mut c.bn.gamma);
            out.push(&mut c.bn.beta);
            out.push(&mut c.bn.running_mean);
            out.push(&mut c.bn.running_var);
        }
        for d in &mut self.dense {
            out.push(&mut d.params.weight);
            out.push(&mut d.params.bias);
        }
        out
    }

    /// Learnable parameters; gradients use this order.
    pub fn learnable(&self) -> Vec<(String, ParamKind, &Tensor<T>)> {
        self.named_tensors().into_iter().filter(|(_, k, _)| k.learnable()).collect()
    }

    pub fn learnable_mut(&mut self) -> Vec<(ParamKind, &mut Tensor<T>)> {
        let kinds: Vec<ParamKind> = self.named_tensors().iter().map(|(_, k, _)| *k).collect();
        kinds
            .into_iter()
            .zip(self.tensors_mut())
            .filter(|(k, _)| k.learnable())
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.learnable().iter().map(|(_, _, t)| t.len()).sum()
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<usize> {
        let d = input.dims4()?;
        if d.c != self.spec.input_channels {
            return Err(Error::invalid_shape(input.shape(), "input must have 3 channels"));
        }
        let div = (self.spec.pool_factor * SCALE_FACTORS[NUM_SCALES - 1]).max(16);
        if d.h % div != 0 || d.w % div != 0 {
            return Err(Error::invalid_shape(
                input.shape(),
                format!("height and width must be divisible by {div}"),
            ));
        }
        Ok(d.n)
    }

    fn trunk_forward(&self, x: Tensor<T>, mode: LayerMode) -> Result<TrunkCache<T>> {
        let steps = self.trunk_plan.len();
        let mut cache = TrunkCache {
            acts: Vec::with_capacity(steps + 1),
            bn: Vec::with_capacity(steps),
            pools: Vec::with_capacity(steps),
            stats: Vec::new(),
        };
        cache.acts.push(x);
        for step in &self.trunk_plan {
            let x = cache.acts.last().expect("input present");
            match *step {
                TrunkStep::Conv { block, shortcut } => {
                    let b = &self.convs[block];
                    let z = conv2d(x, &b.conv)?;
                    let out = batchnorm(&z, &b.bn, mode)?;
                    let mut y = out.output;
                    if let Some(src) = shortcut {
                        y = residual_add(&y, &cache.acts[src])?;
                    }
                    cache.acts.push(relu(&y));
                    cache.bn.push(Some(out.cache));
                    cache.pools.push(None);
                    if let Some(s) = out.stats {
                        cache.stats.push(s);
                    }
                }
                TrunkStep::Pool => {
                    let (y, idx) = maxpool2(x)?;
                    cache.acts.push(y);
                    cache.bn.push(None);
                    cache.pools.push(Some(idx));
                }
            }
        }
        Ok(cache)
    }

    fn trunk_backward(&self, cache: &TrunkCache<T>, grad: Tensor<T>) -> Result<Vec<ConvBlockGrads<T>>> {
        let steps = self.trunk_plan.len();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; steps + 1];
        grads[steps] = Some(grad);
        let mut out: Vec<Option<ConvBlockGrads<T>>> = vec![None; self.convs.len()];
        let accumulate = |slot: &mut Option<Tensor<T>>, g: Tensor<T>| -> Result<()> {
            match slot {
                Some(s) => s.add_assign(&g),
                None => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        };
        for i in (0..steps).rev() {
            let Some(g) = grads[i + 1].take() else {
                continue;
            };
            match self.trunk_plan[i] {
                TrunkStep::Conv { block, shortcut } => {
                    let b = &self.convs[block];
                    let g = relu_backward(&cache.acts[i + 1], &g)?;
                    if let Some(src) = shortcut {
                        let c = cache.acts[src].shape()[1];
                        accumulate(&mut grads[src], residual_add_backward(&g, c)?)?;
                    }
                    let bn_cache = cache.bn[i].as_ref().expect("conv step has a batch-norm cache");
                    let bg = batchnorm_backward(&g, &b.bn, bn_cache)?;
                    let cg = conv2d_backward(&cache.acts[i], &b.conv, &bg.input, i > 0)?;
                    if let Some(dx) = cg.input {
                        accumulate(&mut grads[i], dx)?;
                    }
                    out[block] = Some(ConvBlockGrads {
                        weight: cg.weight,
                        bias: cg.bias,
                        gamma: bg.gamma,
                        beta: bg.beta,
                    });
                }
                TrunkStep::Pool => {
                    let idx = cache.pools[i].as_ref().expect("pool step has indices");
                    accumulate(&mut grads[i], maxpool2_backward(&g, idx)?)?;
                }
            }
        }
        out.into_iter()
            .enumerate()
            .map(|(i, g)| match g {
                Some(g) => Ok(g),
                // a block whose output never reaches the loss
                None => {
                    let c = &self.convs[i];
                    Ok(ConvBlockGrads {
                        weight: Tensor::zeros_like(&c.conv.weight),
                        bias: Tensor::zeros_like(&c.conv.bias),
                        gamma: Tensor::zeros_like(&c.bn.gamma),
                        beta: Tensor::zeros_like(&c.bn.beta),
                    })
                }
            })
            .collect()
    }

    fn run_trunks(&self, input: &Tensor<T>, mode: LayerMode) -> Result<Vec<TrunkCache<T>>> {
        let pyramid = build_pyramid(input)?;
        let [l0, l1, l2] = pyramid.levels;
        [l0, l1, l2].into_iter().map(|l| self.trunk_forward(l, mode)).collect()
    }

    /// Per-pixel class scores in eval mode, shape `(N, classes, H, W)`.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(input)?;
        let caches = self.run_trunks(input, LayerMode::Eval)?;
        let outs = trunk_outputs(&caches);
        let mut x = fused_dense_coarse(outs, &self.dense[0].params)?;
        let last = self.dense.len() - 1;
        if last > 0 {
            x = relu(&x);
        }
        for step in &self.head_plan {
            if let HeadStep::Dense(k) = *step {
                x = dense_per_pixel(&x, &self.dense[k].params)?;
                if k != last {
                    x = relu(&x);
                }
            }
        }
        let logits = upsample(&x, self.spec.pool_factor)?;
        if !logits.all_finite() {
            return Err(Error::NonFinite("network output".into()));
        }
        Ok(logits)
    }

    /// Softmax of [`Network::forward`].
    pub fn predict_proba(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        softmax_per_pixel(&self.forward(input)?)
    }

    /// Training-mode loss without gradients. Uses batch statistics and the dropout masks keyed by `dropout_key`.
    pub fn train_loss(
        &self,
        input: &Tensor<T>,
        labels: &[u8],
        class_weights: &[f64],
        lambda: f64,
        dropout_key: RngState,
    ) -> Result<StepOutput<T>> {
        self.train_pass(input, labels, class_weights, lambda, dropout_key, false)
    }

    /// Training-mode loss and gradients for one batch.
    pub fn train_step(
        &self,
        input: &Tensor<T>,
        labels: &[u8],
        class_weights: &[f64],
        lambda: f64,
        dropout_key: RngState,
    ) -> Result<StepOutput<T>> {
        self.train_pass(input, labels, class_weights, lambda, dropout_key, true)
    }

    fn train_pass(
        &self,
        input: &Tensor<T>,
        labels: &[u8],
        class_weights: &[f64],
        lambda: f64,
        dropout_key: RngState,
        backward: bool,
    ) -> Result<StepOutput<T>> {
        let n = self.check_input(input)?;
        let d = input.dims4()?;
        let classes = self.num_classes();
        if class_weights.len() != classes {
            return Err(Error::InvalidArgument(format!(
                "{} class weights for a {classes}-class network",
                class_weights.len()
            )));
        }
        check_labels(labels, (n, d.h, d.w), classes)?;
        let caches = self.run_trunks(input, LayerMode::Train)?;
        let outs = trunk_outputs(&caches);
        let head = HeadPass {
            net: self,
            a0: fused_dense_coarse(outs, &self.dense[0].params)?,
            labels,
            weights: class_weights.iter().map(|&w| T::from_f64_lossy(w)).collect(),
            key: dropout_key,
            h: d.h,
            w: d.w,
            scale: T::from_f64_lossy(1.0 / (n * d.h * d.w) as f64),
        };
        let per_sample = par::try_map_indices(n, |i| head.sample(i, backward))?;

        let pixels = n * d.h * d.w;
        let ce_sum: f64 = per_sample.iter().map(|s| s.ce_sum).sum();
        let correct = per_sample.iter().map(|s| s.correct).sum();
        let cross_entropy = ce_sum / pixels as f64;
        if !cross_entropy.is_finite() {
            return Err(Error::NonFinite("cross-entropy".into()));
        }
        let stats = caches.iter().map(|c| c.stats.clone()).collect();

        let mut grads = Vec::new();
        if backward {
            let mut dense_grads: Vec<(Tensor<T>, Tensor<T>)> = self
                .dense
                .iter()
                .map(|b| (Tensor::zeros_like(&b.params.weight), Tensor::zeros_like(&b.params.bias)))
                .collect();
            let a0_shape = head.a0.shape().to_vec();
            let mut da0 = Vec::with_capacity(head.a0.len());
            for s in per_sample {
                for (k, (gw, gb)) in s.dense.into_iter().enumerate() {
                    if let Some((gw, gb)) = gw.zip(gb) {
                        dense_grads[k + 1].0.add_assign(&gw)?;
                        dense_grads[k + 1].1.add_assign(&gb)?;
                    }
                }
                da0.extend(s.da0);
            }
            let fg = fused_dense_coarse_backward(outs, &self.dense[0].params, &Tensor::new(a0_shape, da0)?)?;
            dense_grads[0] = (fg.weight, fg.bias);

            let mut conv_grads: Option<Vec<ConvBlockGrads<T>>> = None;
            for (cache, g) in caches.iter().zip(fg.trunk) {
                let gs = self.trunk_backward(cache, g)?;
                match conv_grads.as_mut() {
                    None => conv_grads = Some(gs),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&gs) {
                            a.add(g)?;
                        }
                    }
                }
            }
            for g in conv_grads.expect("three scales") {
                grads.extend([g.weight, g.bias, g.gamma, g.beta]);
            }
            for (w, b) in dense_grads {
                grads.extend([w, b]);
            }
        }

        let learnable = self.learnable();
        let decayed: Vec<&Tensor<T>> = learnable.iter().filter(|(_, k, _)| k.decays()).map(|(_, _, t)| *t).collect();
        let penalty = if backward {
            let mut decayed_grads: Vec<&mut Tensor<T>> = grads
                .iter_mut()
                .zip(&learnable)
                .filter(|(_, (_, k, _))| k.decays())
                .map(|(g, _)| g)
                .collect();
            l2_penalty(lambda, &decayed, Some(&mut decayed_grads))
        } else {
            l2_penalty::<T>(lambda, &decayed, None)
        };
        Ok(StepOutput {
            loss: cross_entropy + penalty,
            cross_entropy,
            correct,
            pixels,
            grads,
            stats,
        })
    }

    /// Fold batch statistics into the running averages, scale by scale.
    pub fn apply_batch_stats(&mut self, stats: &[Vec<BatchStats>]) -> Result<()> {
        for per_scale in stats {
            if per_scale.len() != self.convs.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} batch statistics for {} conv blocks",
                    per_scale.len(),
                    self.convs.len()
                )));
            }
            for (b, s) in self.convs.iter_mut().zip(per_scale) {
                b.bn.update_running(s);
            }
        }
        Ok(())
    }
}

fn trunk_outputs<T>(caches: &[TrunkCache<T>]) -> [&Tensor<T>; NUM_SCALES] {
    [0, 1, 2].map(|s| caches[s].acts.last().expect("trunk output"))
}

struct HeadPass<'a, T> {
    net: &'a Network<T>,
    /// First dense layer pre-activation on the coarse grid.
    a0: Tensor<T>,
    labels: &'a [u8],
    weights: Vec<T>,
    key: RngState,
    h: usize,
    w: usize,
    scale: T,
}

struct SampleHead<T> {
    ce_sum: f64,
    correct: usize,
    /// Gradients for dense layers 1.. (layer 0 is handled on the coarse grid).
    dense: Vec<(Option<Tensor<T>>, Option<Tensor<T>>)>,
    da0: Vec<T>,
}

impl<T: Scalar> HeadPass<'_, T> {
    fn sample(&self, n: usize, backward: bool) -> Result<SampleHead<T>> {
        let net = self.net;
        let f = net.spec.pool_factor;
        let (h, w) = (self.h, self.w);
        let (hc, wc) = (h / f, w / f);
        let cells = hc * wc;
        let classes = self.weights.len();
        let d0 = net.dense[0].params.out_dim();
        let last = net.dense.len() - 1;
        let a0 = self.a0.sample(n);
        let labels = &self.labels[n * h * w..(n + 1) * h * w];
        // logits are constant over each f x f block, so the loss only needs label counts per cell
        let mut counts = vec![0u32; cells * classes];
        for (p, &y) in labels.iter().enumerate() {
            let q = (p / w / f) * wc + (p % w) / f;
            counts[q * classes + y as usize] += 1;
        }

        let mut dw: Vec<Vec<T>> = net.dense[1..].iter().map(|b| vec![T::zero(); b.params.weight.len()]).collect();
        let mut db: Vec<Vec<T>> = net.dense[1..].iter().map(|b| vec![T::zero(); b.params.bias.len()]).collect();
        let mut da0 = if backward { vec![T::zero(); d0 * cells] } else { Vec::new() };
        let mut ce_sum = 0.0;
        let mut correct = 0;

        for q0 in (0..cells).step_by(HEAD_TILE) {
            let pt = HEAD_TILE.min(cells - q0);
            let mut x = vec![T::zero(); d0 * pt];
            for c in 0..d0 {
                let src = &a0[c * cells + q0..c * cells + q0 + pt];
                for (v, &s) in x[c * pt..(c + 1) * pt].iter_mut().zip(src) {
                    *v = if last > 0 { s.max(T::zero()) } else { s };
                }
            }
            let relu0 = x.clone();
            // per step: layer input (dense) or mask (dropout)
            let mut saved: Vec<Vec<T>> = Vec::with_capacity(net.head_plan.len());
            let mut width = d0;
            for step in &net.head_plan {
                match *step {
                    HeadStep::Dropout { keep, ordinal } => {
                        let key = self.key.split(ordinal).split(n as u64);
                        let inv = T::from_f64_lossy(1.0 / keep);
                        let mut mask = vec![T::zero(); width * pt];
                        for c in 0..width {
                            for j in 0..pt {
                                let mut r = RngState {
                                    seed: key.seed,
                                    position: (c * cells + q0 + j) as u64,
                                };
                                if r.bernoulli(keep) {
                                    mask[c * pt + j] = inv;
                                }
                            }
                        }
                        for (v, &m) in x.iter_mut().zip(&mask) {
                            *v = *v * m;
                        }
                        saved.push(mask);
                    }
                    HeadStep::Dense(k) => {
                        let p = &net.dense[k].params;
                        let od = p.out_dim();
                        let mut z = vec![T::zero(); od * pt];
                        for (o, row) in z.chunks_mut(pt).enumerate() {
                            row.fill(p.bias.data()[o]);
                        }
                        gemm(
                            T::one(),
                            MatRef::new(p.weight.data(), od, width),
                            MatRef::new(&x, width, pt),
                            T::one(),
                            &mut z,
                        );
                        if k != last {
                            for v in &mut z {
                                *v = v.max(T::zero());
                            }
                        }
                        saved.push(std::mem::replace(&mut x, z));
                        width = od;
                    }
                }
            }

            let mut g = if backward { vec![T::zero(); x.len()] } else { Vec::new() };
            let (l, c) = cross_entropy_counts(
                &x,
                &counts[q0 * classes..(q0 + pt) * classes],
                &self.weights,
                self.scale,
                backward.then_some(g.as_mut_slice()),
            );
            ce_sum += l;
            correct += c;
            if !backward {
                continue;
            }

            // x holds the logits; walk the head in reverse
            let mut out = x;
            for (step, input) in net.head_plan.iter().zip(saved).rev() {
                match *step {
                    HeadStep::Dropout { .. } => {
                        for (gv, &m) in g.iter_mut().zip(&input) {
                            *gv = *gv * m;
                        }
                    }
                    HeadStep::Dense(k) => {
                        if k != last {
                            for (gv, &o) in g.iter_mut().zip(&out) {
                                if o <= T::zero() {
                                    *gv = T::zero();
                                }
                            }
                        }
                        let p = &net.dense[k].params;
                        let (od, id) = (p.out_dim(), p.in_dim());
                        gemm(
                            T::one(),
                            MatRef::new(&g, od, pt),
                            MatRef::new(&input, id, pt).t(),
                            T::one(),
                            &mut dw[k - 1],
                        );
                        for (o, row) in g.chunks(pt).enumerate() {
                            db[k - 1][o] = db[k - 1][o] + row.iter().copied().sum();
                        }
                        let mut gx = vec![T::zero(); id * pt];
                        gemm(
                            T::one(),
                            MatRef::new(p.weight.data(), od, id).t(),
                            MatRef::new(&g, od, pt),
                            T::zero(),
                            &mut gx,
                        );
                        g = gx;
                        // the previous dense layer's output, needed for its ReLU mask
                        out = input;
                    }
                }
            }
            // through the first layer's ReLU
            for c in 0..d0 {
                let dst = &mut da0[c * cells + q0..c * cells + q0 + pt];
                for j in 0..pt {
                    if last == 0 || relu0[c * pt + j] > T::zero() {
                        dst[j] = g[c * pt + j];
                    }
                }
            }
        }

        let dense = if backward {
            dw.into_iter()
                .zip(db)
                .zip(&net.dense[1..])
                .map(|((w, b), blk)| {
                    Ok((
                        Some(Tensor::new(blk.params.weight.shape().to_vec(), w)?),
                        Some(Tensor::new(vec![b.len()], b)?),
                    ))
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(SampleHead {
            ce_sum,
            correct,
            dense,
            da0,
        })
    }
}

/// Build one of the published architectures with He-initialized weights.
pub fn build_network(arch: Arch, role: Role, seed: u64) -> Result<Network<f32>> {
    if arch == Arch::Custom {
        return Err(Error::InvalidArgument("custom networks are built with Network::init".into()));
    }
    let net = Network::init(NetworkSpec::new(arch, role), &mut RngState::new(seed))?;
    debug_assert_eq!(net.parameter_count(), count_parameters(net.spec()).trainable);
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::LayerSpec;
    use crate::layers::{dense_per_pixel, dropout_backward, DropoutMask};
    use crate::loss::softmax_cross_entropy;
    use crate::multiscale::fuse_scales;

    fn tiny(role: Role) -> NetworkSpec {
        NetworkSpec::custom(
            role,
            vec![
                LayerSpec::conv("Conv0", 3, 4),
                LayerSpec::conv_res("Conv1", 3, 4, "Conv0"),
                LayerSpec::maxpool("Maxpool0"),
                LayerSpec::conv("Conv2", 3, 6),
                LayerSpec::conv_res("Conv3", 1, 6, "Maxpool0"),
                LayerSpec::dense("FCL0", 8),
                LayerSpec::dropout("Dropout0", 0.7),
                LayerSpec::dense("FCL1", 5),
                LayerSpec::dense("FCL2", role.num_classes()),
            ],
            0.001,
        )
        .unwrap()
    }

    fn input(rng: &mut RngState, n: usize, hw: usize) -> Tensor<f64> {
        Tensor::from_fn(&[n, 3, hw, hw], |_| rng.standard_normal()).unwrap()
    }

    #[test]
    fn output_shapes_and_param_counts() {
        for arch in [Arch::Vgg19Reduced, Arch::Resnet23] {
            for role in [Role::Segmenter, Role::Classifier] {
                let net = build_network(arch, role, 1).unwrap();
                assert_eq!(net.parameter_count(), count_parameters(net.spec()).trainable);
            }
        }
        let net: Network<f64> = Network::init(tiny(Role::Classifier), &mut RngState::new(2)).unwrap();
        let y = net.forward(&input(&mut RngState::new(3), 1, 32)).unwrap();
        assert_eq!(y.shape(), &[1, 7, 32, 32]);
        assert!(net.forward(&input(&mut RngState::new(3), 1, 24)).is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build_network(Arch::Resnet23, Role::Segmenter, 5).unwrap();
        let b = build_network(Arch::Resnet23, Role::Segmenter, 5).unwrap();
        assert_eq!(a, b);
        let c = build_network(Arch::Resnet23, Role::Segmenter, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn he_init_scale() {
        let net = build_network(Arch::Vgg19Reduced, Role::Classifier, 9).unwrap();
        let w = &net.convs[4].conv.weight; // 3x3x128 -> 256
        let var = w.sum_squares() / w.len() as f64;
        let want = 2.0 / (9.0 * 128.0);
        assert!((var / want - 1.0).abs() < 0.02, "{var} vs {want}");
        assert!(net.convs.iter().all(|c| c.conv.bias.sum() == 0.0 && c.bn.gamma.sum() == c.bn.gamma.len() as f64));
    }

    /// Eval-mode output equals the literal pipeline: fuse at full resolution, then dense layers per pixel.
    #[test]
    fn eval_forward_matches_literal_fusion() {
        let mut rng = RngState::new(11);
        let net: Network<f64> = Network::init(tiny(Role::Classifier), &mut RngState::new(4)).unwrap();
        let x = input(&mut rng, 2, 32);
        let caches = net.run_trunks(&x, LayerMode::Eval).unwrap();
        let fused = fuse_scales(trunk_outputs(&caches), net.spec.pool_factor).unwrap();
        let mut h = relu(&dense_per_pixel(&fused, &net.dense[0].params).unwrap());
        h = relu(&dense_per_pixel(&h, &net.dense[1].params).unwrap());
        let literal = dense_per_pixel(&h, &net.dense[2].params).unwrap();
        assert!(net.forward(&x).unwrap().max_abs_diff(&literal).unwrap() < 1e-10);
    }

    /// Training loss equals the literal pipeline with an explicitly materialized dropout mask.
    #[test]
    fn train_loss_matches_literal_pipeline() {
        let mut rng = RngState::new(12);
        let net: Network<f64> = Network::init(tiny(Role::Segmenter), &mut RngState::new(4)).unwrap();
        let (n, hw) = (2, 32);
        let x = input(&mut rng, n, hw);
        let labels: Vec<u8> = (0..n * hw * hw).map(|_| rng.below(2) as u8).collect();
        let weights = [0.8, 1.7];
        let key = RngState::new(77);
        let got = net.train_loss(&x, &labels, &weights, 0.0, key).unwrap();

        let caches = net.run_trunks(&x, LayerMode::Train).unwrap();
        let fused = fuse_scales(trunk_outputs(&caches), net.spec.pool_factor).unwrap();
        let h0 = relu(&dense_per_pixel(&fused, &net.dense[0].params).unwrap());
        // one mask value per channel and pooled block
        let f = net.spec.pool_factor;
        let dims = h0.dims4().unwrap();
        let (hc, wc) = (dims.h / f, dims.w / f);
        let mask = Tensor::from_fn(h0.shape(), |i| {
            let (s, rest) = (i / dims.sample(), i % dims.sample());
            let (c, y, x) = (rest / (dims.h * dims.w), rest / dims.w % dims.h, rest % dims.w);
            let mut r = RngState {
                seed: key.split(0).split(s as u64).seed,
                position: (c * hc * wc + (y / f) * wc + x / f) as u64,
            };
            if r.bernoulli(0.7) {
                1.0 / 0.7
            } else {
                0.0
            }
        })
        .unwrap();
        let h0 = dropout_backward(&h0, Some(&DropoutMask(mask))).unwrap();
        let h1 = relu(&dense_per_pixel(&h0, &net.dense[1].params).unwrap());
        let logits = dense_per_pixel(&h1, &net.dense[2].params).unwrap();
        let want = softmax_cross_entropy(&logits, &labels, &weights).unwrap();
        assert!((got.cross_entropy - want.loss).abs() < 1e-10);
        assert_eq!(got.correct, want.correct);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = RngState::new(21);
        let mut net: Network<f64> = Network::init(tiny(Role::Classifier), &mut RngState::new(8)).unwrap();
        // zero biases put dead pixels exactly on a ReLU kink
        for (kind, t) in net.learnable_mut() {
            if kind == ParamKind::DenseBias {
                t.data_mut().iter_mut().for_each(|v| *v = 0.1 * rng.standard_normal());
            }
        }
        let x = input(&mut rng, 2, 16);
        let labels: Vec<u8> = (0..2 * 256).map(|_| rng.below(7) as u8).collect();
        let weights = [1.0, 0.5, 2.0, 1.5, 0.7, 1.1, 0.9];
        let key = RngState::new(5);
        let lambda = 0.01;
        let step = net.train_step(&x, &labels, &weights, lambda, key).unwrap();
        let h = 1e-5;
        let mut probe = net.clone();
        let count = probe.learnable().len();
        let mut worst = 0.0f64;
        for t in 0..count {
            let len = probe.learnable()[t].2.len();
            for e in [0, len / 2, len - 1] {
                let orig = probe.learnable()[t].2.data()[e];
                let mut set = |v: f64| {
                    probe.learnable_mut()[t].1.data_mut()[e] = v;
                };
                set(orig + h);
                let lp = probe.train_loss(&x, &labels, &weights, lambda, key).unwrap().loss;
                probe.learnable_mut()[t].1.data_mut()[e] = orig - h;
                let lm = probe.train_loss(&x, &labels, &weights, lambda, key).unwrap().loss;
                probe.learnable_mut()[t].1.data_mut()[e] = orig;
                let numeric = (lp - lm) / (2.0 * h);
                let analytic = step.grads[t].data()[e];
                // conv biases ahead of batch norm have exactly zero gradient, hence the floor
                let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(err);
                assert!(err < 1e-4, "{} [{e}]: analytic {analytic} numeric {numeric}", probe.learnable()[t].0);
            }
        }
        assert!(worst < 1e-4);
    }

    #[test]
    fn running_stats_move_toward_batch() {
        let mut rng = RngState::new(3);
        let mut net: Network<f64> = Network::init(tiny(Role::Segmenter), &mut RngState::new(1)).unwrap();
        let x = input(&mut rng, 2, 16).map(|v| 5.0 + v);
        let labels = vec![0u8; 512];
        let step = net.train_loss(&x, &labels, &[1.0, 1.0], 0.0, RngState::new(0)).unwrap();
        assert_eq!(step.stats.len(), 3);
        let before = net.convs[0].bn.running_mean.clone();
        net.apply_batch_stats(&step.stats).unwrap();
        assert_ne!(before, net.convs[0].bn.running_mean);
    }
}
