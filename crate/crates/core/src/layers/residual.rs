use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `x + shortcut`, zero-padding the shortcut's channel axis when it is narrower.
pub fn residual_add<T: Scalar>(x: &Tensor<T>, shortcut: &Tensor<T>) -> Result<Tensor<T>> {
    let (d, s) = (x.dims4()?, shortcut.dims4()?);
    if d.n != s.n || d.h != s.h || d.w != s.w || s.c > d.c {
        return Err(Error::shape(x.shape(), shortcut.shape()));
    }
    let mut out = x.clone();
    let span = s.sample();
    for n in 0..d.n {
        let dst = &mut out.data_mut()[n * d.sample()..][..span];
        for (o, &v) in dst.iter_mut().zip(shortcut.sample(n)) {
            *o = *o + v;
        }
    }
    Ok(out)
}

/// Gradient for the shortcut branch: the leading channels of `grad_out`.
/// The main branch receives `grad_out` unchanged.
pub fn residual_add_backward<T: Scalar>(grad_out: &Tensor<T>, shortcut_channels: usize) -> Result<Tensor<T>> {
    let d = grad_out.dims4()?;
    if shortcut_channels > d.c {
        return Err(Error::InvalidArgument(format!(
            "shortcut has {shortcut_channels} channels, output only {}",
            d.c
        )));
    }
    let span = shortcut_channels * d.plane();
    let mut data = Vec::with_capacity(d.n * span);
    for n in 0..d.n {
        data.extend_from_slice(&grad_out.sample(n)[..span]);
    }
    Tensor::new(vec![d.n, shortcut_channels, d.h, d.w], data)
}
