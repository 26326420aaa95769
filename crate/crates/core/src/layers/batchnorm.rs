use crate::error::{Error, Result};
use crate::layers::LayerMode;
use crate::par;
use crate::scalar::Scalar;
use crate::tensor::{Dims4, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

/// Per-channel batch normalization state.
///
/// `momentum` weights the old running value:
/// `running = momentum * running + (1 - momentum) * batch`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub epsilon: f64,
}

/// Batch mean and unbiased variance per channel, to be folded into the running stats.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct BatchNormCache<T = f32> {
    mode: LayerMode,
    x_hat: Tensor<T>,
    inv_std: Vec<T>,
}

#[derive(Debug)]
pub struct BatchNormOutput<T = f32> {
    pub output: Tensor<T>,
    pub cache: BatchNormCache<T>,
    /// Present in train mode only.
    pub stats: Option<BatchStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormGrads<T = f32> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> BatchNormParams<T> {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(BatchNormParams {
            gamma: Tensor::full(&[channels], T::one())?,
            beta: Tensor::zeros(&[channels])?,
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::full(&[channels], T::one())?,
            momentum: DEFAULT_MOMENTUM,
            epsilon: DEFAULT_EPSILON,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        for t in [&self.beta, &self.running_mean, &self.running_var] {
            if t.shape() != [c] {
                return Err(Error::shape(t.shape(), &[c]));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument("batch-norm epsilon must be positive".into()));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::InvalidArgument("batch-norm momentum must lie in (0, 1)".into()));
        }
        if self.running_var.data().iter().any(|&v| v < T::zero()) {
            return Err(Error::InvalidArgument("running variance must be non-negative".into()));
        }
        Ok(())
    }

    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = T::from_f64_lossy(m * r.to_f64_lossy() + (1.0 - m) * b);
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = T::from_f64_lossy(m * r.to_f64_lossy() + (1.0 - m) * b);
        }
    }
}

fn channel_iter<T: Scalar>(data: &[T], d: Dims4, c: usize) -> impl Iterator<Item = &T> {
    (0..d.n).flat_map(move |n| data[(n * d.c + c) * d.plane()..][..d.plane()].iter())
}

/// Normalize per channel over `(N, H, W)`; then scale by gamma and shift by beta.
///
/// Train mode uses batch statistics and reports them in `stats`; eval mode
/// uses the running statistics only.
pub fn batchnorm<T: Scalar>(x: &Tensor<T>, p: &BatchNormParams<T>, mode: LayerMode) -> Result<BatchNormOutput<T>> {
    let d = x.dims4()?;
    if d.c != p.channels() {
        return Err(Error::shape(&[d.c], &[p.channels()]));
    }
    if mode == LayerMode::Train && d.n < 2 {
        return Err(Error::InvalidArgument(
            "batch normalization in train mode needs a batch of at least 2".into(),
        ));
    }
    let m = (d.n * d.plane()) as f64;
    let per_channel: Vec<(f64, f64, f64)> = par::map_indices(d.c, |c| match mode {
        LayerMode::Train => {
            let mean = channel_iter(x.data(), d, c).map(|v| v.to_f64_lossy()).sum::<f64>() / m;
            let var = channel_iter(x.data(), d, c)
                .map(|v| (v.to_f64_lossy() - mean).powi(2))
                .sum::<f64>()
                / m;
            (mean, var, 1.0 / (var + p.epsilon).sqrt())
        }
        LayerMode::Eval => {
            let mean = p.running_mean.data()[c].to_f64_lossy();
            let var = p.running_var.data()[c].to_f64_lossy();
            (mean, var, 1.0 / (var + p.epsilon).sqrt())
        }
    });

    let mut x_hat = Tensor::zeros_like(x);
    let mut out = Tensor::zeros_like(x);
    let plane = d.plane();
    let stats_ref = &per_channel;
    par::for_each_chunk(x_hat.data_mut(), plane, |i, chunk| {
        let (mean, _, inv) = stats_ref[i % d.c];
        let (mean, inv) = (T::from_f64_lossy(mean), T::from_f64_lossy(inv));
        for (o, &v) in chunk.iter_mut().zip(&x.data()[i * plane..(i + 1) * plane]) {
            *o = (v - mean) * inv;
        }
    });
    let (g, b) = (p.gamma.data(), p.beta.data());
    let xh = x_hat.data();
    par::for_each_chunk(out.data_mut(), plane, |i, chunk| {
        let c = i % d.c;
        for (o, &v) in chunk.iter_mut().zip(&xh[i * plane..(i + 1) * plane]) {
            *o = g[c] * v + b[c];
        }
    });
    out.debug_check_finite("batchnorm")?;

    let stats = (mode == LayerMode::Train).then(|| {
        let unbias = m / (m - 1.0).max(1.0);
        BatchStats {
            mean: per_channel.iter().map(|s| s.0).collect(),
            var: per_channel.iter().map(|s| s.1 * unbias).collect(),
        }
    });
    Ok(BatchNormOutput {
        output: out,
        cache: BatchNormCache {
            mode,
            x_hat,
            inv_std: per_channel.iter().map(|s| T::from_f64_lossy(s.2)).collect(),
        },
        stats,
    })
}

pub fn batchnorm_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    p: &BatchNormParams<T>,
    cache: &BatchNormCache<T>,
) -> Result<BatchNormGrads<T>> {
    grad_out.expect_same_shape(&cache.x_hat)?;
    let d = grad_out.dims4()?;
    let m = (d.n * d.plane()) as f64;
    let g = grad_out.data();
    let xh = cache.x_hat.data();
    // (sum dy, sum dy * x_hat) per channel, in fixed order
    let sums: Vec<(f64, f64)> = par::map_indices(d.c, |c| {
        channel_iter(g, d, c)
            .zip(channel_iter(xh, d, c))
            .fold((0.0, 0.0), |(s, sx), (&gv, &xv)| {
                let gv = gv.to_f64_lossy();
                (s + gv, sx + gv * xv.to_f64_lossy())
            })
    });
    let gamma = p.gamma.data();
    let plane = d.plane();
    let mut dx = Tensor::zeros_like(grad_out);
    let sums_ref = &sums;
    par::for_each_chunk(dx.data_mut(), plane, |i, chunk| {
        let c = i % d.c;
        let gsrc = &g[i * plane..(i + 1) * plane];
        let xsrc = &xh[i * plane..(i + 1) * plane];
        match cache.mode {
            LayerMode::Train => {
                let (s, sx) = sums_ref[c];
                let k = T::from_f64_lossy(gamma[c].to_f64_lossy() * cache.inv_std[c].to_f64_lossy() / m);
                let (mean_g, mean_gx) = (T::from_f64_lossy(s), T::from_f64_lossy(sx));
                let mm = T::from_f64_lossy(m);
                for ((o, &gv), &xv) in chunk.iter_mut().zip(gsrc).zip(xsrc) {
                    *o = k * (mm * gv - mean_g - xv * mean_gx);
                }
            }
            LayerMode::Eval => {
                let k = gamma[c] * cache.inv_std[c];
                for (o, &gv) in chunk.iter_mut().zip(gsrc) {
                    *o = k * gv;
                }
            }
        }
    });
    Ok(BatchNormGrads {
        input: dx,
        gamma: Tensor::new(vec![d.c], sums.iter().map(|s| T::from_f64_lossy(s.1)).collect())?,
        beta: Tensor::new(vec![d.c], sums.iter().map(|s| T::from_f64_lossy(s.0)).collect())?,
    })
}
