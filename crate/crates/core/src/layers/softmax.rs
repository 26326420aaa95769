use crate::error::{Error, Result};
use crate::par;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Softmax over the channel axis at every pixel, with max subtraction.
pub fn softmax_per_pixel<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let d = logits.dims4()?;
    if d.c < 2 {
        return Err(Error::invalid_shape(logits.shape(), "softmax needs at least 2 channels"));
    }
    let hw = d.plane();
    let mut out = Tensor::zeros_like(logits);
    par::for_each_chunk(out.data_mut(), d.sample(), |n, dst| {
        let z = logits.sample(n);
        for p in 0..hw {
            let mut max = z[p];
            for c in 1..d.c {
                max = max.max(z[c * hw + p]);
            }
            let mut total = T::zero();
            for c in 0..d.c {
                let e = (z[c * hw + p] - max).exp();
                dst[c * hw + p] = e;
                total = total + e;
            }
            for c in 0..d.c {
                dst[c * hw + p] = dst[c * hw + p] / total;
            }
        }
    });
    Ok(out)
}

/// Vector-Jacobian product of the softmax: `y * (g - sum_c g y)` per pixel.
pub fn softmax_backward<T: Scalar>(probs: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    probs.expect_same_shape(grad_out)?;
    let d = probs.dims4()?;
    let hw = d.plane();
    let mut dz = Tensor::zeros_like(probs);
    par::for_each_chunk(dz.data_mut(), d.sample(), |n, dst| {
        let (y, g) = (probs.sample(n), grad_out.sample(n));
        for p in 0..hw {
            let mut dot = T::zero();
            for c in 0..d.c {
                dot = dot + y[c * hw + p] * g[c * hw + p];
            }
            for c in 0..d.c {
                dst[c * hw + p] = y[c * hw + p] * (g[c * hw + p] - dot);
            }
        }
    });
    Ok(dz)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    #[test]
    fn equal_logits_uniform() {
        let z = Tensor::full(&[1, 7, 2, 2], 3.3f64).unwrap();
        let y = softmax_per_pixel(&z).unwrap();
        assert!(y.data().iter().all(|&v| (v - 1.0 / 7.0).abs() < 1e-12));
    }

    #[test]
    fn two_class_value() {
        let z = Tensor::new(vec![1, 2, 1, 1], vec![10.0f64, 0.0]).unwrap();
        let y = softmax_per_pixel(&z).unwrap();
        let want = 10f64.exp() / (10f64.exp() + 1.0);
        assert!((y.data()[0] - want).abs() < 1e-15);
        assert!((y.data()[0] - 0.9999546).abs() < 1e-7);
        assert!((y.data()[1] - 0.0000454).abs() < 1e-7);
    }

    #[test]
    fn shift_invariance_sums_and_argmax() {
        let mut rng = RngState::new(6);
        let z: Tensor<f64> = Tensor::from_fn(&[2, 5, 3, 3], |_| rng.standard_normal() * 4.0).unwrap();
        let y = softmax_per_pixel(&z).unwrap();
        let shifted = softmax_per_pixel(&z.map(|v| v + 100.0)).unwrap();
        assert!(y.max_abs_diff(&shifted).unwrap() < 1e-12);
        let hw = 9;
        for n in 0..2 {
            for p in 0..hw {
                let s: f64 = (0..5).map(|c| y.sample(n)[c * hw + p]).sum();
                assert!((s - 1.0).abs() < 1e-12);
                let am = |t: &Tensor<f64>| {
                    (0..5)
                        .max_by(|&a, &b| t.sample(n)[a * hw + p].total_cmp(&t.sample(n)[b * hw + p]))
                        .unwrap()
                };
                assert_eq!(am(&y), am(&z));
            }
        }
    }

    #[test]
    fn huge_logits_do_not_overflow() {
        let z = Tensor::new(vec![1, 2, 1, 1], vec![1.0e4f32, -1.0e4]).unwrap();
        let y = softmax_per_pixel(&z).unwrap();
        assert!(y.all_finite());
        assert_eq!(y.data()[0], 1.0);
    }
}
