use std::ops::Range;

use crate::error::{Error, Result};
use crate::par;
use crate::scalar::{gemm, gemm_strided, MatRef, Scalar};
use crate::tensor::{Dims4, Tensor};

/// Filter bank of a stride-1, zero "same"-padded convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T = f32> {
    /// `(out_channels, in_channels, kh, kw)`
    pub weight: Tensor<T>,
    /// `(out_channels)`
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads<T = f32> {
    /// `None` when the caller did not ask for it (first layer).
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let [out_c, _, kh, kw] = weight.shape()[..] else {
            return Err(Error::invalid_shape(weight.shape(), "conv weight must be (outC, inC, kH, kW)"));
        };
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid_shape(weight.shape(), "kernel extents must be odd"));
        }
        if bias.shape() != [out_c] {
            return Err(Error::shape(bias.shape(), &[out_c]));
        }
        Ok(ConvParams { weight, bias })
    }

    pub fn zeros(out_c: usize, in_c: usize, kh: usize, kw: usize) -> Result<Self> {
        Self::new(Tensor::zeros(&[out_c, in_c, kh, kw])?, Tensor::zeros(&[out_c])?)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    fn patch_len(&self) -> usize {
        let (kh, kw) = self.kernel();
        self.in_channels() * kh * kw
    }
}

/// Patch-matrix entries per tile; keeps the unfolded block cache-resident.
const TILE_ELEMS: usize = 1 << 18;

/// Output row blocks that partition `0..h` for a patch length of `k`.
fn row_tiles(k: usize, h: usize, w: usize, one_by_one: bool) -> impl Iterator<Item = Range<usize>> {
    let step = if one_by_one { h } else { (TILE_ELEMS / (k * w).max(1)).clamp(1, h.max(1)) };
    (0..h).step_by(step).map(move |r| r..(r + step).min(h))
}

/// Unfold output rows `rows` of one sample `(C, H, W)` into
/// `(C*kh*kw, rows.len()*W)` patch columns.
fn im2col<T: Scalar>(x: &[T], d: Dims4, kh: usize, kw: usize, rows: Range<usize>, cols: &mut [T]) {
    let (h, w) = (d.h, d.w);
    let (ph, pw) = (kh / 2, kw / 2);
    let hw = h * w;
    let len = rows.len() * w;
    for c in 0..d.c {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut cols[((c * kh + ky) * kw + kx) * len..][..len];
                // valid output columns: 0 <= ox + kx - pw < w
                let x_lo = pw.saturating_sub(kx);
                let x_hi = (w + pw).saturating_sub(kx).min(w);
                for (r, oy) in rows.clone().enumerate() {
                    let dst = &mut row[r * w..(r + 1) * w];
                    let iy = oy + ky;
                    if iy < ph || iy - ph >= h || x_lo >= x_hi {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[(iy - ph) * w..(iy - ph + 1) * w];
                    dst[..x_lo].fill(T::zero());
                    dst[x_hi..].fill(T::zero());
                    let sx = x_lo + kx - pw;
                    dst[x_lo..x_hi].copy_from_slice(&src[sx..sx + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patch columns of output rows `rows` into `(C, H, W)`.
fn col2im<T: Scalar>(cols: &[T], d: Dims4, kh: usize, kw: usize, rows: Range<usize>, x: &mut [T]) {
    let (h, w) = (d.h, d.w);
    let (ph, pw) = (kh / 2, kw / 2);
    let hw = h * w;
    let len = rows.len() * w;
    for c in 0..d.c {
        let plane = &mut x[c * hw..(c + 1) * hw];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &cols[((c * kh + ky) * kw + kx) * len..][..len];
                let x_lo = pw.saturating_sub(kx);
                let x_hi = (w + pw).saturating_sub(kx).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for (r, oy) in rows.clone().enumerate() {
                    let iy = oy + ky;
                    if iy < ph || iy - ph >= h {
                        continue;
                    }
                    let src = &row[r * w + x_lo..r * w + x_hi];
                    let sx = x_lo + kx - pw;
                    let dst = &mut plane[(iy - ph) * w + sx..][..src.len()];
                    for (o, &v) in dst.iter_mut().zip(src) {
                        *o = *o + v;
                    }
                }
            }
        }
    }
}

fn check_input<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Dims4> {
    let d = x.dims4()?;
    if d.c != p.in_channels() {
        return Err(Error::InvalidArgument(format!(
            "conv2d expects {} input channels, got {} (input shape {:?}, weight shape {:?})",
            p.in_channels(),
            d.c,
            x.shape(),
            p.weight.shape()
        )));
    }
    Ok(d)
}

pub fn conv2d<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let d = check_input(x, p)?;
    let oc = p.out_channels();
    let hw = d.plane();
    let k = p.patch_len();
    let (kh, kw) = p.kernel();
    let one = kh == 1 && kw == 1;
    let mut out = Tensor::zeros(&[d.n, oc, d.h, d.w])?;
    let w = p.weight.data();
    let b = p.bias.data();
    par::for_each_chunk(out.data_mut(), oc * hw, |n, dst| {
        let xs = x.sample(n);
        let mut buf = Vec::new();
        for (c, row) in dst.chunks_mut(hw).enumerate() {
            row.fill(b[c]);
        }
        for rows in row_tiles(k, d.h, d.w, one) {
            let (start, len) = (rows.start * d.w, rows.len() * d.w);
            let cols = if one {
                MatRef::columns(xs, k, hw, start, len)
            } else {
                buf.resize(k * len, T::zero());
                im2col(xs, d, kh, kw, rows, &mut buf);
                MatRef::new(&buf, k, len)
            };
            gemm_strided(T::one(), MatRef::new(w, oc, k), cols, T::one(), &mut dst[start..], hw);
        }
    });
    out.debug_check_finite("conv2d")?;
    Ok(out)
}

/// Gradients of [`conv2d`] given the upstream gradient `grad_out`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let d = check_input(x, p)?;
    let oc = p.out_channels();
    let expected = [d.n, oc, d.h, d.w];
    if grad_out.shape() != expected {
        return Err(Error::shape(grad_out.shape(), &expected));
    }
    let hw = d.plane();
    let k = p.patch_len();
    let (kh, kw) = p.kernel();
    let one = kh == 1 && kw == 1;
    let w = p.weight.data();

    let per_sample = par::map_indices(d.n, |n| {
        let xs = x.sample(n);
        let g = grad_out.sample(n);
        let mut buf = Vec::new();
        let mut dcols = Vec::new();
        let mut dw = vec![T::zero(); oc * k];
        let mut dx = need_input_grad.then(|| vec![T::zero(); d.sample()]);
        for rows in row_tiles(k, d.h, d.w, one) {
            let (start, len) = (rows.start * d.w, rows.len() * d.w);
            let gt = MatRef::columns(g, oc, hw, start, len);
            let cols = if one {
                MatRef::columns(xs, k, hw, start, len)
            } else {
                buf.resize(k * len, T::zero());
                im2col(xs, d, kh, kw, rows.clone(), &mut buf);
                MatRef::new(&buf, k, len)
            };
            gemm(T::one(), gt, cols.t(), T::one(), &mut dw);
            if let Some(dx) = dx.as_mut() {
                let wt = MatRef::new(w, oc, k).t();
                if one {
                    gemm_strided(T::one(), wt, gt, T::zero(), &mut dx[start..], hw);
                } else {
                    dcols.resize(k * len, T::zero());
                    gemm(T::one(), wt, gt, T::zero(), &mut dcols);
                    col2im(&dcols, d, kh, kw, rows, dx);
                }
            }
        }
        let db: Vec<T> = g.chunks(hw).map(|r| r.iter().copied().sum()).collect();
        (dw, db, dx)
    });

    let mut dw = vec![T::zero(); oc * k];
    let mut db = vec![T::zero(); oc];
    let mut dx = need_input_grad.then(|| Vec::with_capacity(x.len()));
    for (sw, sb, sx) in per_sample {
        for (a, b) in dw.iter_mut().zip(sw) {
            *a = *a + b;
        }
        for (a, b) in db.iter_mut().zip(sb) {
            *a = *a + b;
        }
        if let (Some(all), Some(sx)) = (dx.as_mut(), sx) {
            all.extend_from_slice(&sx);
        }
    }
    Ok(ConvGrads {
        input: dx.map(|v| Tensor::new(x.shape().to_vec(), v)).transpose()?,
        weight: Tensor::new(p.weight.shape().to_vec(), dw)?,
        bias: Tensor::new(vec![oc], db)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Distribution, RngState};

    /// Quadruple-loop direct sum with explicit zero padding.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let d = x.dims4().unwrap();
        let [oc, ic, kh, kw] = w.shape()[..] else { unreachable!() };
        let mut out = Tensor::zeros(&[d.n, oc, d.h, d.w]).unwrap();
        let (ph, pw) = (kh as isize / 2, kw as isize / 2);
        for n in 0..d.n {
            for o in 0..oc {
                for y in 0..d.h {
                    for xx in 0..d.w {
                        let mut acc = b.data()[o];
                        for c in 0..ic {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = y as isize + ky as isize - ph;
                                    let ix = xx as isize + kx as isize - pw;
                                    if iy < 0 || ix < 0 || iy >= d.h as isize || ix >= d.w as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((n * ic + c) * d.h + iy as usize) * d.w + ix as usize];
                                    let wv = w.data()[((o * ic + c) * kh + ky) * kw + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out.data_mut()[((n * oc + o) * d.h + y) * d.w + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn all_ones_overlap_counts() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0f32).unwrap();
        let p = ConvParams::new(Tensor::full(&[1, 1, 3, 3], 1.0).unwrap(), Tensor::zeros(&[1]).unwrap()).unwrap();
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = RngState::new(3);
        let x: Tensor<f32> = rng.draw(Distribution::Normal { mean: 0.0, std: 1.0 }, &[2, 3, 5, 4]).unwrap();
        for k in [3usize, 7] {
            let mut w = Tensor::zeros(&[3, 3, k, k]).unwrap();
            for c in 0..3 {
                w.data_mut()[((c * 3 + c) * k + k / 2) * k + k / 2] = 1.0;
            }
            let p = ConvParams::new(w, Tensor::zeros(&[3]).unwrap()).unwrap();
            assert_eq!(conv2d(&x, &p).unwrap(), x);
        }
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = RngState::new(11);
        let normal = Distribution::Normal { mean: 0.0, std: 1.0 };
        for k in [1usize, 3, 7] {
            let x: Tensor<f64> = rng.draw(normal, &[2, 3, 5, 5]).unwrap();
            let w: Tensor<f64> = rng.draw(normal, &[4, 3, k, k]).unwrap();
            let b: Tensor<f64> = rng.draw(normal, &[4]).unwrap();
            let p = ConvParams::new(w.clone(), b.clone()).unwrap();
            let got = conv2d(&x, &p).unwrap();
            assert!(got.max_abs_diff(&naive_conv(&x, &w, &b)).unwrap() < 1e-10);
        }
    }

    #[test]
    fn linear_in_input() {
        let mut rng = RngState::new(5);
        let normal = Distribution::Normal { mean: 0.0, std: 1.0 };
        let a: Tensor<f64> = rng.draw(normal, &[1, 2, 4, 6]).unwrap();
        let b: Tensor<f64> = rng.draw(normal, &[1, 2, 4, 6]).unwrap();
        let p = ConvParams::new(rng.draw(normal, &[3, 2, 3, 3]).unwrap(), Tensor::zeros(&[3]).unwrap()).unwrap();
        let mix = a.zip_map(&b, |u, v| 2.0 * u - 0.5 * v).unwrap();
        let lhs = conv2d(&mix, &p).unwrap();
        let rhs = conv2d(&a, &p)
            .unwrap()
            .zip_map(&conv2d(&b, &p).unwrap(), |u, v| 2.0 * u - 0.5 * v)
            .unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
    }

    #[test]
    fn channel_mismatch_and_bad_kernel() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]).unwrap();
        let p = ConvParams::<f32>::zeros(1, 3, 3, 3).unwrap();
        assert!(conv2d(&x, &p).is_err());
        assert!(ConvParams::<f32>::zeros(1, 1, 2, 2).is_err());
    }

    #[test]
    fn tiles_partition_rows() {
        for (k, h, w) in [(1568usize, 96usize, 96usize), (9, 5, 5), (100_000, 7, 3)] {
            let tiles: Vec<_> = row_tiles(k, h, w, false).collect();
            assert_eq!(tiles.first().unwrap().start, 0);
            assert_eq!(tiles.last().unwrap().end, h);
            assert!(tiles.windows(2).all(|p| p[0].end == p[1].start));
        }
    }

    #[test]
    fn tiled_matches_naive_on_tall_inputs() {
        // enough rows and channels that the patch matrix spans several tiles
        let mut rng = RngState::new(12);
        let normal = Distribution::Normal { mean: 0.0, std: 1.0 };
        let x: Tensor<f64> = rng.draw(normal, &[1, 16, 80, 40]).unwrap();
        let w: Tensor<f64> = rng.draw(normal, &[2, 16, 7, 7]).unwrap();
        let b: Tensor<f64> = rng.draw(normal, &[2]).unwrap();
        assert!(row_tiles(16 * 49, 80, 40, false).count() > 1);
        let p = ConvParams::new(w.clone(), b.clone()).unwrap();
        let got = conv2d(&x, &p).unwrap();
        assert!(got.max_abs_diff(&naive_conv(&x, &w, &b)).unwrap() < 1e-9);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let mut rng = RngState::new(8);
        let d = Dims4 { n: 1, c: 2, h: 4, w: 5 };
        let x: Vec<f64> = (0..d.sample()).map(|_| rng.standard_normal()).collect();
        let c: Vec<f64> = (0..2 * 9 * 20).map(|_| rng.standard_normal()).collect();
        let mut cols = vec![0.0; c.len()];
        im2col(&x, d, 3, 3, 0..4, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&c, d, 3, 3, 0..4, &mut back);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
