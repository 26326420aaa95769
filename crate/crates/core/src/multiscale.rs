//! Three-level Gaussian pyramid and cross-scale feature fusion.
//!
//! The trunk runs on each pyramid level with shared weights. Its outputs are
//! restored to full input resolution by nearest-neighbour upsampling and
//! concatenated on the channel axis, so the fused map has three times the
//! trunk's channel count.
//!
//! Because every fused block is a nearest-neighbour upsample of a coarse map,
//! the first dense layer on the fused map is constant over each
//! `pool_factor x pool_factor` block. [`fused_dense_coarse`] evaluates it on
//! that coarse grid directly; it agrees with
//! `dense_per_pixel(fuse_scales(..))` up to float summation order.

use crate::error::{Error, Result};
use crate::layers::DenseParams;
use crate::par;
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::{concat_channels, split_channels, upsample, upsample_backward, Tensor};

pub const NUM_SCALES: usize = 3;

/// Spatial divisor of each pyramid level.
pub const SCALE_FACTORS: [usize; NUM_SCALES] = [1, 2, 4];

/// Spatial dims must be divisible by this so both pyramid decimation and trunk pooling land on integers.
pub const REQUIRED_DIVISOR: usize = 16;

const BINOMIAL: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Pyramid levels at scales 1, 1/2, 1/4 of the input.
#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid<T = f32> {
    pub levels: [Tensor<T>; NUM_SCALES],
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i.clamp(0, n - 1) as usize
}

/// Separable 5-tap binomial blur (reflect padding) followed by 2x decimation.
fn blur_decimate<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let d = x.dims4()?;
    let (oh, ow) = (d.h / 2, d.w / 2);
    let k: Vec<T> = BINOMIAL.iter().map(|&v| T::from_f64_lossy(v)).collect();
    let mut out = Tensor::zeros(&[d.n, d.c, oh, ow])?;
    par::for_each_chunk(out.data_mut(), oh * ow, |plane, dst| {
        let src = &x.data()[plane * d.plane()..(plane + 1) * d.plane()];
        // horizontal pass at the even columns only
        let mut rows = vec![T::zero(); d.h * ow];
        for y in 0..d.h {
            for ox in 0..ow {
                let cx = (2 * ox) as isize;
                let mut acc = T::zero();
                for (t, &kv) in k.iter().enumerate() {
                    acc = acc + kv * src[y * d.w + reflect(cx + t as isize - 2, d.w)];
                }
                rows[y * ow + ox] = acc;
            }
        }
        for oy in 0..oh {
            let cy = (2 * oy) as isize;
            for ox in 0..ow {
                let mut acc = T::zero();
                for (t, &kv) in k.iter().enumerate() {
                    acc = acc + kv * rows[reflect(cy + t as isize - 2, d.h) * ow + ox];
                }
                dst[oy * ow + ox] = acc;
            }
        }
    });
    Ok(out)
}

pub fn build_pyramid<T: Scalar>(image: &Tensor<T>) -> Result<Pyramid<T>> {
    let d = image.dims4()?;
    if d.c != 3 {
        return Err(Error::invalid_shape(image.shape(), "pyramid input must have 3 (RGB) channels"));
    }
    if d.h % REQUIRED_DIVISOR != 0 || d.w % REQUIRED_DIVISOR != 0 {
        return Err(Error::invalid_shape(
            image.shape(),
            format!("height and width must be divisible by {REQUIRED_DIVISOR}"),
        ));
    }
    let half = blur_decimate(image)?;
    let quarter = blur_decimate(&half)?;
    Ok(Pyramid {
        levels: [image.clone(), half, quarter],
    })
}

fn check_trunk_outputs<T: Scalar>(outputs: [&Tensor<T>; NUM_SCALES]) -> Result<(usize, usize, usize, usize)> {
    let d0 = outputs[0].dims4()?;
    for (s, t) in outputs.iter().enumerate() {
        let d = t.dims4()?;
        if d.c != d0.c {
            return Err(Error::InvalidArgument(format!(
                "trunk outputs disagree on channel count: scale 0 has {}, scale {s} has {}",
                d0.c, d.c
            )));
        }
        let f = SCALE_FACTORS[s];
        if d.n != d0.n || d.h * f != d0.h || d.w * f != d0.w {
            return Err(Error::shape(outputs[0].shape(), t.shape()));
        }
    }
    Ok((d0.n, d0.c, d0.h, d0.w))
}

/// Restore each trunk output to full input resolution and concatenate on channels.
pub fn fuse_scales<T: Scalar>(outputs: [&Tensor<T>; NUM_SCALES], pool_factor: usize) -> Result<Tensor<T>> {
    check_trunk_outputs(outputs)?;
    let mut full = Vec::with_capacity(NUM_SCALES);
    for (s, t) in outputs.iter().enumerate() {
        let restored = upsample(t, pool_factor)?;
        full.push(upsample(&restored, SCALE_FACTORS[s])?);
    }
    concat_channels(&[&full[0], &full[1], &full[2]])
}

/// Adjoint of [`fuse_scales`].
pub fn fuse_scales_backward<T: Scalar>(
    grad: &Tensor<T>,
    trunk_channels: usize,
    pool_factor: usize,
) -> Result<[Tensor<T>; NUM_SCALES]> {
    let parts = split_channels(grad, &[trunk_channels; NUM_SCALES])?;
    let mut out = Vec::with_capacity(NUM_SCALES);
    for (s, g) in parts.iter().enumerate() {
        let g = upsample_backward(g, SCALE_FACTORS[s])?;
        out.push(upsample_backward(&g, pool_factor)?);
    }
    Ok(out.try_into().expect("three scales"))
}

/// Add `src` (a coarse map) nearest-upsampled by `factor` into `dst`, one plane.
fn add_upsampled<T: Scalar>(dst: &mut [T], dh: usize, dw: usize, src: &[T], factor: usize) {
    let sw = dw / factor;
    for y in 0..dh {
        let srow = &src[(y / factor) * sw..][..sw];
        for (x, v) in dst[y * dw..(y + 1) * dw].iter_mut().enumerate() {
            *v = *v + srow[x / factor];
        }
    }
}

fn check_fused_dense<T: Scalar>(outputs: [&Tensor<T>; NUM_SCALES], p: &DenseParams<T>) -> Result<(usize, usize, usize, usize)> {
    let dims = check_trunk_outputs(outputs)?;
    if p.in_dim() != NUM_SCALES * dims.1 {
        return Err(Error::InvalidArgument(format!(
            "fused dense layer expects {} features, trunk provides {} x {}",
            p.in_dim(),
            NUM_SCALES,
            dims.1
        )));
    }
    Ok(dims)
}

/// Pre-activation of the first dense layer over the fused map, on the scale-1 trunk grid.
///
/// Upsampling the result by the pool factor gives
/// `dense_per_pixel(fuse_scales(outputs, pool_factor), p)`.
pub fn fused_dense_coarse<T: Scalar>(outputs: [&Tensor<T>; NUM_SCALES], p: &DenseParams<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = check_fused_dense(outputs, p)?;
    let od = p.out_dim();
    let in_dim = p.in_dim();
    let mut out = Tensor::zeros(&[n, od, h, w])?;
    let (wt, b) = (p.weight.data(), p.bias.data());
    par::for_each_chunk(out.data_mut(), od * h * w, |i, dst| {
        for (o, row) in dst.chunks_mut(h * w).enumerate() {
            row.fill(b[o]);
        }
        // scale 1 lands directly on this grid
        gemm(
            T::one(),
            MatRef::columns(wt, od, in_dim, 0, c),
            MatRef::new(outputs[0].sample(i), c, h * w),
            T::one(),
            dst,
        );
        for s in 1..NUM_SCALES {
            let f = SCALE_FACTORS[s];
            let (sh, sw) = (h / f, w / f);
            let mut z = vec![T::zero(); od * sh * sw];
            gemm(
                T::one(),
                MatRef::columns(wt, od, in_dim, s * c, c),
                MatRef::new(outputs[s].sample(i), c, sh * sw),
                T::zero(),
                &mut z,
            );
            for (o, plane) in dst.chunks_mut(h * w).enumerate() {
                add_upsampled(plane, h, w, &z[o * sh * sw..(o + 1) * sh * sw], f);
            }
        }
    });
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct FusedDenseGrads<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub trunk: [Tensor<T>; NUM_SCALES],
}

/// Backward of [`fused_dense_coarse`]; `grad` is already summed over each pool block.
pub fn fused_dense_coarse_backward<T: Scalar>(
    outputs: [&Tensor<T>; NUM_SCALES],
    p: &DenseParams<T>,
    grad: &Tensor<T>,
) -> Result<FusedDenseGrads<T>> {
    let (n, c, h, w) = check_fused_dense(outputs, p)?;
    let od = p.out_dim();
    let in_dim = p.in_dim();
    let expected = [n, od, h, w];
    if grad.shape() != expected {
        return Err(Error::shape(grad.shape(), &expected));
    }
    let wt = p.weight.data();
    let mut dweight = vec![T::zero(); od * in_dim];
    let mut trunk = Vec::with_capacity(NUM_SCALES);
    for s in 0..NUM_SCALES {
        let g = upsample_backward(grad, SCALE_FACTORS[s])?;
        let (sh, sw) = (h / SCALE_FACTORS[s], w / SCALE_FACTORS[s]);
        let mut dh = Tensor::zeros(&[n, c, sh, sw])?;
        par::for_each_chunk(dh.data_mut(), c * sh * sw, |i, dst| {
            gemm(
                T::one(),
                MatRef::columns(wt, od, in_dim, s * c, c).t(),
                MatRef::new(g.sample(i), od, sh * sw),
                T::zero(),
                dst,
            );
        });
        trunk.push(dh);
        let per_sample: Vec<Vec<T>> = par::map_indices(n, |i| {
            let mut dw = vec![T::zero(); od * c];
            gemm(
                T::one(),
                MatRef::new(g.sample(i), od, sh * sw),
                MatRef::new(outputs[s].sample(i), c, sh * sw).t(),
                T::zero(),
                &mut dw,
            );
            dw
        });
        for dw in per_sample {
            for o in 0..od {
                let row = &mut dweight[o * in_dim + s * c..][..c];
                for (a, &b) in row.iter_mut().zip(&dw[o * c..(o + 1) * c]) {
                    *a = *a + b;
                }
            }
        }
    }
    let mut db = vec![T::zero(); od];
    for i in 0..n {
        for (o, plane) in grad.sample(i).chunks(h * w).enumerate() {
            db[o] = db[o] + plane.iter().copied().sum();
        }
    }
    Ok(FusedDenseGrads {
        weight: Tensor::new(vec![od, in_dim], dweight)?,
        bias: Tensor::new(vec![od], db)?,
        trunk: trunk.try_into().expect("three scales"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{dense_per_pixel, dense_per_pixel_backward};
    use crate::rng::RngState;

    #[test]
    fn constant_image_stays_constant() {
        let img = Tensor::full(&[1, 3, 32, 48], 128.0f32).unwrap();
        let pyr = build_pyramid(&img).unwrap();
        assert_eq!(pyr.levels[1].shape(), &[1, 3, 16, 24]);
        assert_eq!(pyr.levels[2].shape(), &[1, 3, 8, 12]);
        for l in &pyr.levels {
            assert!(l.data().iter().all(|&v| v == 128.0));
        }
    }

    #[test]
    fn paper_input_size_levels() {
        let img = Tensor::<f32>::zeros(&[1, 3, 288, 288]).unwrap();
        let pyr = build_pyramid(&img).unwrap();
        assert_eq!(pyr.levels[0].shape()[2..], [288, 288]);
        assert_eq!(pyr.levels[1].shape()[2..], [144, 144]);
        assert_eq!(pyr.levels[2].shape()[2..], [72, 72]);
    }

    #[test]
    fn impulse_response_is_sampled_binomial() {
        let (h, w) = (32, 32);
        let (cy, cx) = (16, 16);
        let mut img = Tensor::<f64>::zeros(&[1, 3, h, w]).unwrap();
        for c in 0..3 {
            img.data_mut()[(c * h + cy) * w + cx] = 1.0;
        }
        let level1 = &build_pyramid(&img).unwrap().levels[1];
        // direct 2-D oracle: outer product of the 1-D kernel at even offsets
        for c in 0..3 {
            for dy in -2isize..=2 {
                for dx in -2isize..=2 {
                    let (oy, ox) = ((cy as isize / 2 + dy) as usize, (cx as isize / 2 + dx) as usize);
                    let ky = 2 * dy + 2;
                    let kx = 2 * dx + 2;
                    let want = if (0..5).contains(&ky) && (0..5).contains(&kx) {
                        BINOMIAL[ky as usize] * BINOMIAL[kx as usize]
                    } else {
                        0.0
                    };
                    let got = level1.data()[(c * 16 + oy) * 16 + ox];
                    assert!((got - want).abs() < 1e-15, "({dy},{dx}) {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn indivisible_dims_rejected() {
        let err = build_pyramid(&Tensor::<f32>::zeros(&[1, 3, 40, 32]).unwrap()).unwrap_err();
        assert!(err.to_string().contains("16"));
    }

    #[test]
    fn mean_roughly_preserved_on_smooth_images() {
        let img = Tensor::from_fn(&[1, 3, 64, 64], |i| {
            let (y, x) = ((i / 64) % 64, i % 64);
            100.0 + 40.0 * ((x as f64 / 9.0).sin() * (y as f64 / 13.0).cos())
        })
        .unwrap();
        let pyr = build_pyramid(&img).unwrap();
        let m0 = pyr.levels[0].sum() / pyr.levels[0].len() as f64;
        for l in &pyr.levels[1..] {
            let m = l.sum() / l.len() as f64;
            assert!((m - m0).abs() / m0 < 0.01, "{m} vs {m0}");
        }
    }

    #[test]
    fn fuse_constant_blocks() {
        let a = Tensor::full(&[1, 2, 4, 4], 1.0f32).unwrap();
        let b = Tensor::full(&[1, 2, 2, 2], 2.0f32).unwrap();
        let c = Tensor::full(&[1, 2, 1, 1], 3.0f32).unwrap();
        let f = fuse_scales([&a, &b, &c], 4).unwrap();
        assert_eq!(f.shape(), &[1, 6, 16, 16]);
        let plane = 256;
        for (blk, want) in [1.0, 2.0, 3.0].iter().enumerate() {
            assert!(f.data()[blk * 2 * plane..(blk + 1) * 2 * plane].iter().all(|v| v == want));
        }
        let bad = Tensor::full(&[1, 3, 2, 2], 2.0f32).unwrap();
        assert!(fuse_scales([&a, &bad, &c], 4).is_err());
    }

    fn random_trunk(rng: &mut RngState, n: usize, c: usize, h: usize) -> [Tensor<f64>; 3] {
        let mut t = |s: usize| Tensor::from_fn(&[n, c, h / s, h / s], |_| rng.standard_normal()).unwrap();
        [t(1), t(2), t(4)]
    }

    #[test]
    fn coarse_dense_matches_literal_fusion() {
        let mut rng = RngState::new(31);
        let (n, c, h, f) = (2, 3, 8, 2);
        let trunk = random_trunk(&mut rng, n, c, h);
        let p = DenseParams::new(
            Tensor::from_fn(&[5, 9], |_| rng.standard_normal()).unwrap(),
            Tensor::from_fn(&[5], |_| rng.standard_normal()).unwrap(),
        )
        .unwrap();
        let refs = [&trunk[0], &trunk[1], &trunk[2]];
        let fused = fuse_scales(refs, f).unwrap();
        let literal = dense_per_pixel(&fused, &p).unwrap();
        let coarse = fused_dense_coarse(refs, &p).unwrap();
        assert!(upsample(&coarse, f).unwrap().max_abs_diff(&literal).unwrap() < 1e-12);

        let g = Tensor::from_fn(literal.shape(), |_| rng.standard_normal()).unwrap();
        let lit = dense_per_pixel_backward(&fused, &p, &g).unwrap();
        let lit_trunk = fuse_scales_backward(&lit.input, c, f).unwrap();
        let fast = fused_dense_coarse_backward(refs, &p, &upsample_backward(&g, f).unwrap()).unwrap();
        assert!(fast.weight.max_abs_diff(&lit.weight).unwrap() < 1e-10);
        assert!(fast.bias.max_abs_diff(&lit.bias).unwrap() < 1e-10);
        for s in 0..3 {
            assert!(fast.trunk[s].max_abs_diff(&lit_trunk[s]).unwrap() < 1e-10);
        }
    }
}
