use crate::error::{Error, Result};
use crate::par;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Argmax positions recorded by [`maxpool2`], as flat offsets into the input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    pub input_shape: Vec<usize>,
    pub argmax: Vec<u32>,
}

/// 2x2 max pooling with stride 2. Ties go to the first element in row-major order.
pub fn maxpool2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    let d = x.dims4()?;
    if d.h % 2 != 0 || d.w % 2 != 0 {
        return Err(Error::invalid_shape(x.shape(), "maxpool2 needs even spatial dims"));
    }
    if x.len() > u32::MAX as usize {
        return Err(Error::invalid_shape(x.shape(), "tensor too large for pooling indices"));
    }
    let (oh, ow) = (d.h / 2, d.w / 2);
    let mut argmax = vec![0u32; d.n * d.c * oh * ow];
    let src = x.data();
    par::for_each_chunk(&mut argmax, oh * ow, |p, dst| {
        let base = p * d.plane();
        for oy in 0..oh {
            for ox in 0..ow {
                let corner = base + 2 * oy * d.w + 2 * ox;
                let mut best = corner;
                for off in [1, d.w, d.w + 1] {
                    if src[corner + off] > src[best] {
                        best = corner + off;
                    }
                }
                dst[oy * ow + ox] = best as u32;
            }
        }
    });
    let out = Tensor::new(
        vec![d.n, d.c, oh, ow],
        argmax.iter().map(|&i| src[i as usize]).collect(),
    )?;
    Ok((
        out,
        PoolIndices {
            input_shape: x.shape().to_vec(),
            argmax,
        },
    ))
}

/// Route each upstream gradient to the recorded argmax position.
pub fn maxpool2_backward<T: Scalar>(grad_out: &Tensor<T>, idx: &PoolIndices) -> Result<Tensor<T>> {
    if grad_out.len() != idx.argmax.len() {
        return Err(Error::InvalidArgument(format!(
            "gradient has {} elements, pooling recorded {}",
            grad_out.len(),
            idx.argmax.len()
        )));
    }
    let mut dx = Tensor::zeros(&idx.input_shape)?;
    let dst = dx.data_mut();
    for (&i, &g) in idx.argmax.iter().zip(grad_out.data()) {
        dst[i as usize] = dst[i as usize] + g;
    }
    Ok(dx)
}
