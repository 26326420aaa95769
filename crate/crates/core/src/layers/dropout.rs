use crate::error::{Error, Result};
use crate::layers::LayerMode;
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Inverted-dropout mask: each entry is `0` or `1 / keep_prob`.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask<T = f32>(pub Tensor<T>);

fn check_keep(keep_prob: f64) -> Result<()> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "dropout keep probability {keep_prob} outside (0, 1]"
        )));
    }
    Ok(())
}

/// Returns the output and, when units were actually dropped, the mask for backward.
pub fn dropout<T: Scalar>(
    x: &Tensor<T>,
    keep_prob: f64,
    mode: LayerMode,
    rng: &mut RngState,
) -> Result<(Tensor<T>, Option<DropoutMask<T>>)> {
    check_keep(keep_prob)?;
    if mode == LayerMode::Eval || keep_prob == 1.0 {
        return Ok((x.clone(), None));
    }
    let scale = T::from_f64_lossy(1.0 / keep_prob);
    let mask = Tensor::from_fn(x.shape(), |_| {
        if rng.bernoulli(keep_prob) {
            scale
        } else {
            T::zero()
        }
    })?;
    let y = x.zip_map(&mask, |a, m| a * m)?;
    Ok((y, Some(DropoutMask(mask))))
}

pub fn dropout_backward<T: Scalar>(grad_out: &Tensor<T>, mask: Option<&DropoutMask<T>>) -> Result<Tensor<T>> {
    match mask {
        Some(m) => grad_out.zip_map(&m.0, |g, k| g * k),
        None => Ok(grad_out.clone()),
    }
}
