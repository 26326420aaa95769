//! Dense NCHW tensors and the elementwise and resampling ops built on them.

use crate::error::{Error, Result};
use crate::par;
use crate::scalar::Scalar;

/// Dense row-major tensor. 4-D activations use NCHW order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// Extents of a 4-D tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims4 {
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn sample(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn to_vec(self) -> Vec<usize> {
        vec![self.n, self.c, self.h, self.w]
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::invalid_shape(shape, "zero-dimensional tensors are not allowed"));
    }
    if shape.contains(&0) {
        return Err(Error::invalid_shape(shape, "extents must be positive"));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let len = check_shape(&shape)?;
        if len != data.len() {
            return Err(Error::invalid_shape(
                &shape,
                format!("buffer holds {} elements, shape needs {len}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn zeros_like(other: &Self) -> Self {
        Tensor {
            shape: other.shape.clone(),
            data: vec![T::zero(); other.data.len()],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dims4(&self) -> Result<Dims4> {
        match self.shape[..] {
            [n, c, h, w] => Ok(Dims4 { n, c, h, w }),
            _ => Err(Error::invalid_shape(&self.shape, "expected a 4-D NCHW tensor")),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(Error::shape(&self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(&self.shape, &other.shape));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    /// Sum in index order.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64_lossy()).sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let v = v.to_f64_lossy();
                v * v
            })
            .sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).abs())
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Checked NaN/Inf detection; only active with debug assertions.
    pub fn debug_check_finite(&self, producer: &str) -> Result<()> {
        if cfg!(debug_assertions) && !self.all_finite() {
            return Err(Error::NonFinite(producer.to_string()));
        }
        Ok(())
    }

    /// One sample of a 4-D tensor as a slice.
    pub fn sample(&self, n: usize) -> &[T] {
        let per = self.data.len() / self.shape[0];
        &self.data[n * per..(n + 1) * per]
    }
}

/// Second operand of [`elementwise`].
#[derive(Clone, Copy, Debug)]
pub enum Operand<'a, T> {
    Tensor(&'a Tensor<T>),
    Scalar(T),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    /// Multiply by a scalar.
    Scale,
    /// `max(a, 0)`; the operand is ignored.
    Relu,
    /// Upstream gradient `b` masked by `a > 0`, where `a` is the relu input.
    ReluBackward,
}

pub fn elementwise<T: Scalar>(op: ElementwiseOp, a: &Tensor<T>, b: Operand<'_, T>) -> Result<Tensor<T>> {
    let binary = |f: fn(T, T) -> T| -> Result<Tensor<T>> {
        match b {
            Operand::Tensor(t) => a.zip_map(t, f),
            Operand::Scalar(s) => Ok(a.map(|v| f(v, s))),
        }
    };
    match op {
        ElementwiseOp::Add => binary(|x, y| x + y),
        ElementwiseOp::Sub => binary(|x, y| x - y),
        ElementwiseOp::Mul | ElementwiseOp::Scale => binary(|x, y| x * y),
        ElementwiseOp::Relu => Ok(relu(a)),
        ElementwiseOp::ReluBackward => match b {
            Operand::Tensor(g) => relu_backward(a, g),
            Operand::Scalar(_) => Err(Error::InvalidArgument(
                "relu_backward needs an upstream gradient tensor".into(),
            )),
        },
    }
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of relu: `upstream` where `input > 0`, else zero.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    input.zip_map(upstream, |x, g| if x > T::zero() { g } else { T::zero() })
}

/// Nearest-neighbour upsampling of the spatial axes by an integer factor.
pub fn upsample<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(Error::InvalidArgument("upsample factor must be >= 1".into()));
    }
    let d = x.dims4()?;
    if factor == 1 {
        return Ok(x.clone());
    }
    let (oh, ow) = (d.h * factor, d.w * factor);
    let mut out = Tensor::zeros(&[d.n, d.c, oh, ow])?;
    let src = x.data();
    par::for_each_chunk(out.data_mut(), oh * ow, |plane, dst| {
        let s = &src[plane * d.plane()..(plane + 1) * d.plane()];
        for (oy, row) in dst.chunks_mut(ow).enumerate() {
            let srow = &s[(oy / factor) * d.w..(oy / factor + 1) * d.w];
            for (ox, v) in row.iter_mut().enumerate() {
                *v = srow[ox / factor];
            }
        }
    });
    Ok(out)
}

/// Adjoint of [`upsample`]: sums each `factor x factor` block.
pub fn upsample_backward<T: Scalar>(grad: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    block_reduce(grad, factor, false)
}

/// Spatial mean pooling over non-overlapping `factor x factor` blocks.
pub fn mean_pool<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    block_reduce(x, factor, true)
}

fn block_reduce<T: Scalar>(x: &Tensor<T>, factor: usize, mean: bool) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(Error::InvalidArgument("block factor must be >= 1".into()));
    }
    let d = x.dims4()?;
    if d.h % factor != 0 || d.w % factor != 0 {
        return Err(Error::invalid_shape(
            x.shape(),
            format!("spatial dims must be divisible by {factor}"),
        ));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let (oh, ow) = (d.h / factor, d.w / factor);
    let mut out = Tensor::zeros(&[d.n, d.c, oh, ow])?;
    let src = x.data();
    par::for_each_chunk(out.data_mut(), oh * ow, |plane, dst| {
        let s = &src[plane * d.plane()..(plane + 1) * d.plane()];
        for oy in 0..oh {
            for ox in 0..ow {
                // running mean is exact on constant blocks
                let mut acc = T::zero();
                let mut k = T::zero();
                for dy in 0..factor {
                    let row = &s[(oy * factor + dy) * d.w + ox * factor..][..factor];
                    for &v in row {
                        if mean {
                            k = k + T::one();
                            acc = acc + (v - acc) / k;
                        } else {
                            acc = acc + v;
                        }
                    }
                }
                dst[oy * ow + ox] = acc;
            }
        }
    });
    Ok(out)
}

/// Concatenate 4-D tensors along the channel axis.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to concatenate".into()))?
        .dims4()?;
    let mut total_c = 0;
    for p in parts {
        let d = p.dims4()?;
        if d.n != first.n || d.h != first.h || d.w != first.w {
            return Err(Error::shape(parts[0].shape(), p.shape()));
        }
        total_c += d.c;
    }
    let mut data = Vec::with_capacity(first.n * total_c * first.plane());
    for n in 0..first.n {
        for p in parts {
            data.extend_from_slice(p.sample(n));
        }
    }
    Tensor::new(vec![first.n, total_c, first.h, first.w], data)
}

/// Inverse of [`concat_channels`]: split into blocks of the given channel counts.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, channels: &[usize]) -> Result<Vec<Tensor<T>>> {
    let d = x.dims4()?;
    if channels.iter().sum::<usize>() != d.c {
        return Err(Error::InvalidArgument(format!(
            "channel split {channels:?} does not cover {} channels",
            d.c
        )));
    }
    let mut outs: Vec<Vec<T>> = channels
        .iter()
        .map(|&c| Vec::with_capacity(d.n * c * d.plane()))
        .collect();
    for n in 0..d.n {
        let s = x.sample(n);
        let mut off = 0;
        for (o, &c) in outs.iter_mut().zip(channels) {
            o.extend_from_slice(&s[off * d.plane()..(off + c) * d.plane()]);
            off += c;
        }
    }
    outs.into_iter()
        .zip(channels)
        .map(|(data, &c)| Tensor::new(vec![d.n, c, d.h, d.w], data))
        .collect()
}
