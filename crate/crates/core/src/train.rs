//! Mini-batch SGD with a piecewise-constant learning-rate schedule.
//!
//! Randomness per epoch `e` comes from `rng.split(e)`: sub-stream 0 shuffles
//! the sample order, 1 drives augmentation (split again by sample index) and
//! 2 keys the dropout masks (split by batch index). A run is therefore a pure
//! function of the seed, the data and the configuration.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::arch::Role;
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::data::augment::{augment, AugmentConfig};
use crate::data::{class_pixel_counts, stack, Normalization, Sample};
use crate::error::{Error, Result};
use crate::eval::evaluate_network;
use crate::loss::{class_balance_weights, ClassBalance};
use crate::network::Network;
use crate::par;
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub epochs: usize,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub segments: Vec<Segment>,
    pub batch_size: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::from_pairs(&[(70, 1e-3), (50, 1e-4), (25, 1e-5), (15, 1e-6)], 5)
    }
}

/// Where a run stands in its schedule.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulePosition {
    /// Index of the next epoch to run.
    pub epoch: usize,
    pub segment: usize,
    pub learning_rate: f64,
}

impl Schedule {
    pub fn from_pairs(pairs: &[(usize, f64)], batch_size: usize) -> Self {
        Schedule {
            segments: pairs
                .iter()
                .map(|&(epochs, learning_rate)| Segment { epochs, learning_rate })
                .collect(),
            batch_size,
        }
    }

    /// A single segment of `epochs` at a fixed rate.
    pub fn constant(epochs: usize, learning_rate: f64, batch_size: usize) -> Self {
        Schedule::from_pairs(&[(epochs, learning_rate)], batch_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::Config("schedule has no segments".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        for s in &self.segments {
            if s.epochs == 0 || !(s.learning_rate > 0.0 && s.learning_rate.is_finite()) {
                return Err(Error::Config(format!(
                    "schedule segment {s:?} needs a positive epoch count and learning rate"
                )));
            }
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.segments.iter().map(|s| s.epochs).sum()
    }

    /// Segment index and rate for zero-based `epoch`; past the end the last rate holds.
    pub fn position(&self, epoch: usize) -> SchedulePosition {
        let mut start = 0;
        for (i, s) in self.segments.iter().enumerate() {
            if epoch < start + s.epochs {
                return SchedulePosition {
                    epoch,
                    segment: i,
                    learning_rate: s.learning_rate,
                };
            }
            start += s.epochs;
        }
        let last = self.segments.len().saturating_sub(1);
        SchedulePosition {
            epoch,
            segment: last,
            learning_rate: self.segments.get(last).map_or(0.0, |s| s.learning_rate),
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.position(epoch).learning_rate
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub schedule: Schedule,
    /// L2 coefficient; `None` uses the architecture's default.
    pub lambda: Option<f64>,
    pub momentum: f64,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    /// Measure eval-mode accuracy every this many epochs (0: only after the last).
    pub eval_every: usize,
    pub class_balance: bool,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schedule: Schedule::default(),
            lambda: None,
            momentum: 0.0,
            checkpoint_every: 10,
            eval_every: 1,
            class_balance: true,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.augment.validate()?;
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("lambda {l} must be finite and >= 0")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean training loss over the epoch's batches (cross-entropy plus L2).
    pub loss: f64,
    pub cross_entropy: f64,
    /// Pixel accuracy of the training passes themselves (train mode, augmented inputs).
    pub batch_accuracy: f64,
    /// Eval-mode pixel accuracy on the un-augmented training set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub held_out_accuracy: Option<f64>,
    pub seconds: f64,
}

/// Consecutive batches of `batch_size`; a trailing batch of one joins the previous batch.
pub fn batch_ranges(n: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = (0..n)
        .step_by(batch_size.max(1))
        .map(|s| s..(s + batch_size).min(n))
        .collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").end = last.end;
    }
    out
}

/// The samples as the given role sees them: binary masks for the segmenter.
pub fn role_samples(samples: &[Sample], role: Role) -> Vec<Sample> {
    match role {
        Role::Segmenter => samples.iter().map(Sample::binary).collect(),
        Role::Classifier => samples.to_vec(),
    }
}

pub struct Trainer {
    network: Network<f32>,
    cfg: TrainConfig,
    normalization: Normalization,
    balance: ClassBalance,
    lambda: f64,
    rng: RngState,
    epoch: usize,
    velocity: Vec<Tensor<f32>>,
}

impl Trainer {
    /// Input statistics and class weights are taken from `train`.
    pub fn new(network: Network<f32>, train: &[Sample], cfg: TrainConfig, rng: RngState) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let classes = network.num_classes();
        for s in train {
            if let Some((r, c, v)) = s.mask.first_invalid(classes) {
                return Err(Error::Data(format!(
                    "{}: label {v} at ({r}, {c}) does not fit a {classes}-class {} network",
                    s.id,
                    network.spec().role
                )));
            }
        }
        let normalization = Normalization::compute(train)?;
        let balance = if cfg.class_balance {
            class_balance_weights(&class_pixel_counts(train, classes))?
        } else {
            let counts = class_pixel_counts(train, classes);
            let total = counts.iter().sum::<u64>().max(1) as f64;
            ClassBalance {
                weights: vec![1.0; classes],
                frequencies: counts.iter().map(|&c| c as f64 / total).collect(),
                absent: (0..classes).filter(|&c| counts[c] == 0).collect(),
            }
        };
        if !balance.absent.is_empty() {
            warn!("classes {:?} have no training pixels and get weight 0", balance.absent);
        }
        let lambda = cfg.lambda.unwrap_or_else(|| network.spec().weight_decay);
        let velocity = if cfg.momentum > 0.0 {
            network.learnable().iter().map(|(_, _, t)| Tensor::zeros_like(t)).collect()
        } else {
            Vec::new()
        };
        Ok(Trainer {
            network,
            cfg,
            normalization,
            balance,
            lambda,
            rng,
            epoch: 0,
            velocity,
        })
    }

    pub fn network(&self) -> &Network<f32> {
        &self.network
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    pub fn class_balance(&self) -> &ClassBalance {
        &self.balance
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            network: self.network.clone(),
            normalization: self.normalization.clone(),
            class_weights: self.balance.weights.clone(),
            epoch: self.epoch,
            rng: self.rng,
            schedule_position: self.cfg.schedule.position(self.epoch),
        }
    }

    /// One SGD update with precomputed gradients, in [`Network::learnable`] order.
    pub fn apply_gradients(&mut self, grads: &[Tensor<f32>], learning_rate: f64) -> Result<()> {
        let lr = learning_rate as f32;
        let mu = self.cfg.momentum as f32;
        let params = self.network.learnable_mut();
        if params.len() != grads.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (i, ((_, w), g)) in params.into_iter().zip(grads).enumerate() {
            w.expect_same_shape(g)?;
            if self.velocity.is_empty() {
                for (w, g) in w.data_mut().iter_mut().zip(g.data()) {
                    *w -= lr * g;
                }
            } else {
                let v = &mut self.velocity[i];
                for ((w, v), g) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *v = mu * *v + g;
                    *w -= lr * *v;
                }
            }
        }
        Ok(())
    }

    pub fn run_epoch(&mut self, train: &[Sample], held_out: &[Sample]) -> Result<EpochMetrics> {
        let start = Instant::now();
        let e = self.epoch;
        let lr = self.cfg.schedule.lr_at(e);
        let stream = self.rng.split(e as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        stream.split(0).shuffle(&mut order);
        let aug_root = stream.split(1);
        let dropout_root = stream.split(2);

        let mut loss_sum = 0.0;
        let mut ce_sum = 0.0;
        let mut pixels = 0usize;
        let mut correct = 0usize;
        for (b, range) in batch_ranges(order.len(), self.cfg.schedule.batch_size).into_iter().enumerate() {
            let idx = &order[range];
            let augmented = par::try_map_indices(idx.len(), |k| {
                let i = idx[k];
                augment(&train[i], &self.cfg.augment, &mut aug_root.split(i as u64))
            })?;
            let refs: Vec<&Sample> = augmented.iter().collect();
            let (images, labels) = stack(&refs)?;
            let input = self.normalization.apply(&images)?;
            let nan = || Error::NanLoss {
                epoch: e,
                batch: b,
                samples: idx.iter().map(|&i| train[i].id.clone()).collect(),
            };
            let out = match self.network.train_step(
                &input,
                &labels,
                &self.balance.weights,
                self.lambda,
                dropout_root.split(b as u64),
            ) {
                Err(Error::NonFinite(_)) => return Err(nan()),
                r => r?,
            };
            if !out.loss.is_finite() || out.grads.iter().any(|g| !g.all_finite()) {
                return Err(nan());
            }
            self.apply_gradients(&out.grads, lr)?;
            self.network.apply_batch_stats(&out.stats)?;
            loss_sum += out.loss * out.pixels as f64;
            ce_sum += out.cross_entropy * out.pixels as f64;
            pixels += out.pixels;
            correct += out.correct;
        }
        self.epoch += 1;

        let last = self.epoch == self.cfg.schedule.total_epochs();
        let measure = last || (self.cfg.eval_every > 0 && self.epoch % self.cfg.eval_every == 0);
        let (train_accuracy, held_out_accuracy) = if measure {
            let t = evaluate_network(&self.network, &self.normalization, train)?.overall_accuracy;
            let h = if held_out.is_empty() {
                None
            } else {
                Some(evaluate_network(&self.network, &self.normalization, held_out)?.overall_accuracy)
            };
            (Some(t), h)
        } else {
            (None, None)
        };
        Ok(EpochMetrics {
            epoch: e,
            learning_rate: lr,
            loss: loss_sum / pixels as f64,
            cross_entropy: ce_sum / pixels as f64,
            batch_accuracy: correct as f64 / pixels as f64,
            train_accuracy,
            held_out_accuracy,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Run the remaining epochs of the schedule. With `out_dir`, append each
    /// epoch to `metrics.jsonl` and write `epoch_NNNN.ckpt` files at the
    /// configured cadence plus `final.ckpt` at the end.
    pub fn fit(
        &mut self,
        train: &[Sample],
        held_out: &[Sample],
        out_dir: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochMetrics),
    ) -> Result<Vec<EpochMetrics>> {
        let mut log = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("metrics.jsonl");
                let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                Some((path, std::io::BufWriter::new(f)))
            }
            None => None,
        };
        let total = self.cfg.schedule.total_epochs();
        let mut history = Vec::with_capacity(total.saturating_sub(self.epoch));
        while self.epoch < total {
            let m = self.run_epoch(train, held_out)?;
            info!(
                "epoch {}/{} lr {:e} loss {:.5} acc {:.4}",
                m.epoch + 1,
                total,
                m.learning_rate,
                m.loss,
                m.train_accuracy.unwrap_or(m.batch_accuracy)
            );
            if let Some((path, w)) = log.as_mut() {
                serde_json::to_writer(&mut *w, &m)?;
                writeln!(w).and_then(|_| w.flush()).map_err(|e| Error::io(&*path, e))?;
            }
            if let Some(dir) = out_dir {
                let every = self.cfg.checkpoint_every;
                if every > 0 && self.epoch % every == 0 && self.epoch < total {
                    save_checkpoint(&checkpoint_path(dir, self.epoch), &self.checkpoint())?;
                }
            }
            on_epoch(&m);
            history.push(m);
        }
        if let Some(dir) = out_dir {
            save_checkpoint(&dir.join("final.ckpt"), &self.checkpoint())?;
        }
        Ok(history)
    }
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}.ckpt"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{LayerSpec, NetworkSpec};
    use crate::data::synth::{generate_synthetic, SynthConfig};

    #[test]
    fn default_schedule() {
        let s = Schedule::default();
        assert_eq!(s.total_epochs(), 160);
        assert_eq!(s.batch_size, 5);
        for (e, lr) in [(0, 1e-3), (69, 1e-3), (70, 1e-4), (119, 1e-4), (120, 1e-5), (145, 1e-6), (159, 1e-6)] {
            assert_eq!(s.lr_at(e), lr, "epoch {e}");
        }
        assert_eq!(s.position(130).segment, 2);
        assert!(Schedule::from_pairs(&[(0, 1e-3)], 5).validate().is_err());
        assert!(Schedule::from_pairs(&[(3, -1.0)], 5).validate().is_err());
    }

    #[test]
    fn batches_merge_a_trailing_singleton() {
        let lens = |n, b| batch_ranges(n, b).iter().map(|r| r.len()).collect::<Vec<_>>();
        assert_eq!(lens(8, 5), vec![5, 3]);
        assert_eq!(lens(11, 5), vec![5, 6]);
        assert_eq!(lens(10, 5), vec![5, 5]);
        assert_eq!(lens(1, 5), vec![1]);
    }

    fn tiny_spec() -> NetworkSpec {
        NetworkSpec::custom(
            Role::Classifier,
            vec![
                LayerSpec::conv("Conv0", 3, 4),
                LayerSpec::maxpool("Maxpool0"),
                LayerSpec::dense("FCL0", 8),
                LayerSpec::dropout("Dropout0", 0.5),
                LayerSpec::dense("FCL1", 7),
            ],
            1e-4,
        )
        .unwrap()
    }

    fn tiny_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            schedule: Schedule::constant(epochs, 1e-2, 2),
            eval_every: 0,
            ..Default::default()
        }
    }

    #[test]
    fn sgd_step_is_closed_form() {
        let data = generate_synthetic(2, &SynthConfig::with_size(16), 1).unwrap();
        let net = Network::init(tiny_spec(), &mut RngState::new(0)).unwrap();
        let mut t = Trainer::new(net.clone(), &data, tiny_config(1), RngState::new(0)).unwrap();
        let grads: Vec<Tensor<f32>> = net
            .learnable()
            .iter()
            .map(|(_, _, p)| Tensor::from_fn(p.shape(), |i| (i % 5) as f32 - 2.0).unwrap())
            .collect();
        t.apply_gradients(&grads, 0.25).unwrap();
        for ((_, _, before), ((_, _, after), g)) in net.learnable().iter().zip(t.network().learnable().iter().zip(&grads)) {
            for ((b, a), g) in before.data().iter().zip(after.data()).zip(g.data()) {
                assert_eq!(*a, b - 0.25f32 * g);
            }
        }
    }

    #[test]
    fn momentum_accumulates() {
        let data = generate_synthetic(2, &SynthConfig::with_size(16), 1).unwrap();
        let net = Network::init(tiny_spec(), &mut RngState::new(0)).unwrap();
        let cfg = TrainConfig {
            momentum: 0.5,
            ..tiny_config(1)
        };
        let mut t = Trainer::new(net.clone(), &data, cfg, RngState::new(0)).unwrap();
        let ones: Vec<Tensor<f32>> = net.learnable().iter().map(|(_, _, p)| Tensor::full(p.shape(), 1.0).unwrap()).collect();
        t.apply_gradients(&ones, 1.0).unwrap();
        t.apply_gradients(&ones, 1.0).unwrap();
        // v1 = 1, v2 = 1.5: total step 2.5
        let (_, _, b) = &net.learnable()[0];
        let (_, _, a) = &t.network().learnable()[0];
        assert_eq!(a.data()[0], b.data()[0] - 1.0 - 1.5);
    }

    #[test]
    fn decay_shrinks_weights_without_data_gradient() {
        // lambda only: the step is w - lr * 2 lambda w
        let data = generate_synthetic(2, &SynthConfig::with_size(16), 1).unwrap();
        let net = Network::init(tiny_spec(), &mut RngState::new(0)).unwrap();
        let mut t = Trainer::new(net.clone(), &data, tiny_config(1), RngState::new(0)).unwrap();
        let decayed: Vec<Tensor<f32>> = net
            .learnable()
            .iter()
            .map(|(_, k, p)| if k.decays() { p.map(|v| 2.0 * 0.1 * v) } else { Tensor::zeros_like(p) })
            .collect();
        let norm = |n: &Network<f32>| -> f64 {
            n.learnable().iter().filter(|(_, k, _)| k.decays()).map(|(_, _, p)| p.sum_squares()).sum()
        };
        t.apply_gradients(&decayed, 0.5).unwrap();
        assert!(norm(t.network()) < norm(&net));
    }

    #[test]
    fn training_is_deterministic_and_logs() {
        let data = generate_synthetic(5, &SynthConfig::with_size(16), 2).unwrap();
        let run = |dir: Option<&Path>| {
            let net = Network::init(tiny_spec(), &mut RngState::new(3)).unwrap();
            let cfg = TrainConfig {
                checkpoint_every: 2,
                ..tiny_config(3)
            };
            let mut t = Trainer::new(net, &data[..4], cfg, RngState::new(9)).unwrap();
            let h = t.fit(&data[..4], &data[4..], dir, |_| {}).unwrap();
            (h, t.checkpoint())
        };
        let dir = tempfile::tempdir().unwrap();
        let (a, ca) = run(Some(dir.path()));
        let (b, cb) = run(None);
        let losses = |h: &[EpochMetrics]| h.iter().map(|m| m.loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(losses(&a), losses(&b));
        assert_eq!(ca, cb);
        assert!(a[2].train_accuracy.is_some() && a[2].held_out_accuracy.is_some());
        assert!(a[0].train_accuracy.is_none());

        let log = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 3);
        let first: EpochMetrics = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        assert_eq!(first.loss.to_bits(), a[0].loss.to_bits());
        assert!(checkpoint_path(dir.path(), 2).exists());
        let last = crate::checkpoint::load_checkpoint(&dir.path().join("final.ckpt")).unwrap();
        assert_eq!(last, ca);
        assert_eq!(last.epoch, 3);
    }

    #[test]
    fn segmenter_rejects_multiclass_labels() {
        let data = generate_synthetic(6, &SynthConfig::with_size(16), 2).unwrap();
        let spec = NetworkSpec::custom(
            Role::Segmenter,
            vec![LayerSpec::conv("Conv0", 3, 4), LayerSpec::dense("FCL0", 2)],
            0.0,
        )
        .unwrap();
        let net = Network::init(spec, &mut RngState::new(0)).unwrap();
        if data.iter().any(|s| s.mask.data.iter().any(|&v| v > 1)) {
            assert!(Trainer::new(net.clone(), &data, tiny_config(1), RngState::new(0)).is_err());
        }
        Trainer::new(net, &role_samples(&data, Role::Segmenter), tiny_config(1), RngState::new(0)).unwrap();
    }

    #[test]
    fn exploding_rate_aborts_with_batch_context() {
        let data = generate_synthetic(4, &SynthConfig::with_size(16), 2).unwrap();
        let net = Network::init(tiny_spec(), &mut RngState::new(3)).unwrap();
        let cfg = TrainConfig {
            schedule: Schedule::constant(50, 1e30, 2),
            ..tiny_config(1)
        };
        let mut t = Trainer::new(net, &data, cfg, RngState::new(0)).unwrap();
        let err = t.fit(&data, &[], None, |_| {}).unwrap_err();
        match err {
            Error::NanLoss { samples, .. } => assert_eq!(samples.len(), 2),
            e => panic!("unexpected {e}"),
        }
    }
}
