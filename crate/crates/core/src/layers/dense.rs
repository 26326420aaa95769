use crate::error::{Error, Result};
use crate::par;
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

/// Fully connected layer applied independently at every pixel
/// (a 1x1 convolution over the feature axis).
#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams<T = f32> {
    /// `(out_dim, in_dim)`
    pub weight: Tensor<T>,
    /// `(out_dim)`
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrads<T = f32> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> DenseParams<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let [out_dim, _] = weight.shape()[..] else {
            return Err(Error::invalid_shape(weight.shape(), "dense weight must be (out, in)"));
        };
        if bias.shape() != [out_dim] {
            return Err(Error::shape(bias.shape(), &[out_dim]));
        }
        Ok(DenseParams { weight, bias })
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Result<Self> {
        Self::new(Tensor::zeros(&[out_dim, in_dim])?, Tensor::zeros(&[out_dim])?)
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

pub fn dense_per_pixel<T: Scalar>(x: &Tensor<T>, p: &DenseParams<T>) -> Result<Tensor<T>> {
    let d = x.dims4()?;
    if d.c != p.in_dim() {
        return Err(Error::InvalidArgument(format!(
            "dense layer expects {} features, input has {} channels",
            p.in_dim(),
            d.c
        )));
    }
    let (od, hw) = (p.out_dim(), d.plane());
    let mut out = Tensor::zeros(&[d.n, od, d.h, d.w])?;
    let (w, b) = (p.weight.data(), p.bias.data());
    par::for_each_chunk(out.data_mut(), od * hw, |n, dst| {
        for (o, row) in dst.chunks_mut(hw).enumerate() {
            row.fill(b[o]);
        }
        gemm(
            T::one(),
            MatRef::new(w, od, d.c),
            MatRef::new(x.sample(n), d.c, hw),
            T::one(),
            dst,
        );
    });
    out.debug_check_finite("dense_per_pixel")?;
    Ok(out)
}

pub fn dense_per_pixel_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &DenseParams<T>,
    grad_out: &Tensor<T>,
) -> Result<DenseGrads<T>> {
    let d = x.dims4()?;
    let (od, id, hw) = (p.out_dim(), p.in_dim(), d.plane());
    let expected = [d.n, od, d.h, d.w];
    if grad_out.shape() != expected {
        return Err(Error::shape(grad_out.shape(), &expected));
    }
    let w = p.weight.data();
    let mut dx = Tensor::zeros_like(x);
    par::for_each_chunk(dx.data_mut(), id * hw, |n, dst| {
        gemm(
            T::one(),
            MatRef::new(w, od, id).t(),
            MatRef::new(grad_out.sample(n), od, hw),
            T::zero(),
            dst,
        );
    });
    let per_sample: Vec<Vec<T>> = par::map_indices(d.n, |n| {
        let mut dw = vec![T::zero(); od * id];
        gemm(
            T::one(),
            MatRef::new(grad_out.sample(n), od, hw),
            MatRef::new(x.sample(n), id, hw).t(),
            T::zero(),
            &mut dw,
        );
        dw
    });
    let mut dw = vec![T::zero(); od * id];
    for s in per_sample {
        for (a, b) in dw.iter_mut().zip(s) {
            *a = *a + b;
        }
    }
    let mut db = vec![T::zero(); od];
    for n in 0..d.n {
        for (o, row) in grad_out.sample(n).chunks(hw).enumerate() {
            db[o] = db[o] + row.iter().copied().sum();
        }
    }
    Ok(DenseGrads {
        input: dx,
        weight: Tensor::new(vec![od, id], dw)?,
        bias: Tensor::new(vec![od], db)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weights() {
        let x = Tensor::from_fn(&[2, 3, 2, 2], |i| i as f32 - 6.0).unwrap();
        let mut w = Tensor::zeros(&[3, 3]).unwrap();
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let p = DenseParams::new(w, Tensor::zeros(&[3]).unwrap()).unwrap();
        assert_eq!(dense_per_pixel(&x, &p).unwrap(), x);
    }

    #[test]
    fn single_pixel_is_matrix_vector() {
        let x = Tensor::new(vec![1, 3, 1, 1], vec![1.0f64, -2.0, 0.5]).unwrap();
        let w = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 4.0]).unwrap();
        let p = DenseParams::new(w, Tensor::new(vec![2], vec![0.25, -0.75]).unwrap()).unwrap();
        let y = dense_per_pixel(&x, &p).unwrap();
        // [1 - 4 + 1.5 + 0.25, -1 + 0 + 2 - 0.75]
        assert_eq!(y.data(), &[-1.25, 0.25]);
    }

    #[test]
    fn classifier_head_width() {
        let x = Tensor::<f32>::zeros(&[1, 768, 2, 2]).unwrap();
        let p = DenseParams::zeros(7, 768).unwrap();
        assert_eq!(dense_per_pixel(&x, &p).unwrap().shape(), &[1, 7, 2, 2]);
        assert!(dense_per_pixel(&x, &DenseParams::zeros(7, 767).unwrap()).is_err());
    }
}
