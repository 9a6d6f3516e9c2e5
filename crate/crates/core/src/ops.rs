//! Differentiable tensor primitives composed from candle's basic ops, plus an
//! im2col op with a hand-written backward pass for convolutions.

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, D};

use crate::error::{Error, Result};

/// Matrix product with both operands made contiguous first.
///
/// candle's CPU gemm mishandles stride-0 (broadcast) batch dimensions, so every
/// matmul in the crate goes through here.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(a.contiguous()?.matmul(&b.contiguous()?)?)
}

pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(dim)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    softmax(x, x.rank() - 1)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    // 0.5 * (tanh(x / 2) + 1) avoids overflow in exp for large |x|.
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// Layer normalisation over the last dimension.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

/// `(B, C·r², H, W) -> (B, C, H·r, W·r)` with the same channel ordering as
/// PyTorch's `PixelShuffle`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if c % (r * r) != 0 {
        return Err(Error::shape(format!(
            "pixel_shuffle: {c} channels not divisible by {}",
            r * r
        )));
    }
    let oc = c / (r * r);
    Ok(x
        .reshape((b, oc, r, r, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .reshape((b, oc, h * r, w * r))?)
}

/// Inserts a zero after every row and column: `(B, C, H, W) -> (B, C, 2H, 2W)`.
/// Followed by a stride-1 convolution this is a stride-2 transposed convolution.
pub fn zero_insert2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let x = x.reshape((b, c, h, 1, w, 1))?;
    let x = x.pad_with_zeros(3, 0, 1)?.pad_with_zeros(5, 0, 1)?;
    Ok(x.reshape((b, c, 2 * h, 2 * w))?)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(x: &Tensor, r: usize) -> Result<Tensor> {
    if r == 1 {
        return Ok(x.clone());
    }
    let (b, c, h, w) = x.dims4()?;
    Ok(x
        .reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, r, w, r))?
        .contiguous()?
        .reshape((b, c, h * r, w * r))?)
}

/// 2-D cross-correlation on NCHW input with an `(O, C, K, K)` kernel.
///
/// Implemented as im2col + gemm. Kernels with `k == stride` and no padding
/// take a patchify fast path; 1×1 kernels go straight to a gemm. The general
/// path uses the [`Im2Col`] op, whose backward pass is the matching col2im.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (o, wc, kh, kw) = weight.dims4()?;
    if wc != c || kh != kw {
        return Err(Error::shape(format!(
            "conv2d: input has {c} channels, kernel is {:?}",
            weight.dims()
        )));
    }
    let k = kh;
    let y = if k == 1 && stride == 1 && padding == 0 {
        let wm = weight.reshape((o, c))?;
        let xm = x.reshape((b, c, h * w))?;
        matmul(&wm.unsqueeze(0)?.broadcast_as((b, o, c))?, &xm)?.reshape((b, o, h, w))?
    } else if k == stride && padding == 0 {
        if h % k != 0 || w % k != 0 {
            return Err(Error::shape(format!(
                "conv2d: {h}x{w} input not divisible by patch {k}"
            )));
        }
        let (ho, wo) = (h / k, w / k);
        let patches = x
            .reshape((b, c, ho, k, wo, k))?
            .permute((0, 2, 4, 1, 3, 5))?
            .reshape((b * ho * wo, c * k * k))?;
        let wm = weight.reshape((o, c * k * k))?.t()?;
        matmul(&patches, &wm)?
            .reshape((b, ho, wo, o))?
            .permute((0, 3, 1, 2))?
    } else {
        let hp = h + 2 * padding;
        let wp = w + 2 * padding;
        if hp < k || wp < k {
            return Err(Error::shape("conv2d: kernel larger than padded input"));
        }
        let geom = Im2Col {
            b,
            c,
            h,
            w,
            k,
            stride,
            pad: padding,
            ho: (hp - k) / stride + 1,
            wo: (wp - k) / stride + 1,
        };
        let (ho, wo) = (geom.ho, geom.wo);
        let cols = x.contiguous()?.apply_op1(geom)?;
        let wm = weight.reshape((o, c * k * k))?.t()?;
        matmul(&cols, &wm)?
            .reshape((b, ho, wo, o))?
            .permute((0, 3, 1, 2))?
    };
    match bias {
        Some(bias) => Ok(y.broadcast_add(&bias.reshape((1, o, 1, 1))?)?),
        None => Ok(y),
    }
}

/// Unfolds `(B, C, H, W)` into rows `(B·Ho·Wo, C·K·K)`, column order
/// `(c, ky, kx)`, with zero padding.
#[derive(Debug, Clone, Copy)]
pub struct Im2Col {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Im2Col {
    /// Calls `f(dst, src, kx_range)` for every in-bounds kernel row: the taps
    /// `kx_range` of destination row segment `dst` read the source row
    /// starting at `src`, tap `kx` landing on source column `src_col + kx`.
    #[inline]
    fn for_each_segment(&self, mut f: impl FnMut(usize, isize, std::ops::Range<usize>)) {
        let Im2Col { b, c, h, w, k, stride, pad, ho, wo } = *self;
        let ckk = c * k * k;
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    let x0 = (ox * stride) as isize - pad as isize;
                    // kx with 0 <= x0 + kx < w
                    let lo = (-x0).max(0) as usize;
                    let hi = ((w as isize - x0).max(0) as usize).min(k);
                    if lo >= hi {
                        continue;
                    }
                    let row = ((bi * ho + oy) * wo + ox) * ckk;
                    for ci in 0..c {
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src = (((bi * c + ci) * h + iy as usize) * w) as isize + x0;
                            f(row + (ci * k + ky) * k, src, lo..hi);
                        }
                    }
                }
            }
        }
    }

    fn unfold<T: Copy + Default>(&self, src: &[T]) -> Vec<T> {
        let mut out = vec![T::default(); self.b * self.ho * self.wo * self.c * self.k * self.k];
        self.for_each_segment(|dst, s, r| {
            let s = (s + r.start as isize) as usize;
            out[dst + r.start..dst + r.end].copy_from_slice(&src[s..s + r.len()]);
        });
        out
    }

    fn fold<T: Copy + Default + std::ops::AddAssign>(&self, cols: &[T]) -> Vec<T> {
        let mut out = vec![T::default(); self.b * self.c * self.h * self.w];
        self.for_each_segment(|dst, s, r| {
            let s = (s + r.start as isize) as usize;
            for (o, v) in out[s..s + r.len()].iter_mut().zip(&cols[dst + r.start..dst + r.end]) {
                *o += *v;
            }
        });
        out
    }
}

pub(crate) fn contiguous_slice<'a, T>(v: &'a [T], layout: &Layout, op: &str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&v[start..end]),
        None => candle_core::bail!("{op} needs a contiguous input"),
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.unfold(contiguous_slice(v, layout, "im2col")?)),
            CpuStorage::F64(v) => CpuStorage::F64(self.unfold(contiguous_slice(v, layout, "im2col")?)),
            _ => candle_core::bail!("im2col supports f32 and f64 only"),
        };
        let shape = Shape::from((self.b * self.ho * self.wo, self.c * self.k * self.k));
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(*self))?))
    }
}

/// Adjoint of [`Im2Col`]: scatters receptive-field rows back onto the image, summing overlaps.
struct Col2Im(Im2Col);

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(g.fold(contiguous_slice(v, layout, "col2im")?)),
            CpuStorage::F64(v) => CpuStorage::F64(g.fold(contiguous_slice(v, layout, "col2im")?)),
            _ => candle_core::bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, Shape::from((g.b, g.c, g.h, g.w))))
    }
}

/// 4-channel position encoding `[y, x, 1-y, 1-x]` on an `h × w` grid, values in [0,1].
pub fn position_grid(h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w * 4);
    for i in 0..h {
        let y = if h > 1 { i as f64 / (h - 1) as f64 } else { 0.0 };
        for j in 0..w {
            let x = if w > 1 { j as f64 / (w - 1) as f64 } else { 0.0 };
            out.extend_from_slice(&[y, x, 1.0 - y, 1.0 - x]);
        }
    }
    out
}

/// Builds a tensor of the requested dtype from host `f64` data.
pub fn from_f64(data: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    let t = Tensor::from_vec(data, shape, &Device::Cpu)?;
    Ok(if dtype == DType::F64 { t } else { t.to_dtype(dtype)? })
}

pub fn from_f32(data: Vec<f32>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    let t = Tensor::from_vec(data, shape, &Device::Cpu)?;
    Ok(if dtype == DType::F32 { t } else { t.to_dtype(dtype)? })
}

/// Flattens any float tensor to host `f64`.
pub fn to_vec_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

pub fn to_vec_f32(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(data.to_vec(), shape, &Device::Cpu).unwrap()
    }

    /// Direct nested-loop convolution used as the reference.
    fn conv_ref(
        x: &[f64],
        (b, c, h, w): (usize, usize, usize, usize),
        wt: &[f64],
        (o, k): (usize, usize),
        stride: usize,
        pad: usize,
    ) -> (Vec<f64>, usize, usize) {
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; b * o * ho * wo];
        for bi in 0..b {
            for oi in 0..o {
                for y in 0..ho {
                    for xx in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (y * stride + ky) as isize - pad as isize;
                                    let ix = (xx * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x[((bi * c + ci) * h + iy as usize) * w + ix as usize]
                                        * wt[((oi * c + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                        out[((bi * o + oi) * ho + y) * wo + xx] = acc;
                    }
                }
            }
        }
        (out, ho, wo)
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv2d_matches_direct_loops() {
        for &(b, c, h, o, k, stride, pad) in &[
            (2, 3, 8, 4, 5, 1, 2),
            (2, 3, 8, 4, 5, 2, 2),
            (3, 2, 6, 3, 3, 1, 1),
            (2, 3, 8, 5, 4, 4, 0),
            (2, 4, 4, 6, 1, 1, 0),
            (1, 2, 7, 2, 5, 2, 2),
        ] {
            let x = pseudo(b * c * h * h, 1);
            let wt = pseudo(o * c * k * k, 2);
            let (expected, ho, wo) = conv_ref(&x, (b, c, h, h), &wt, (o, k), stride, pad);
            let y = conv2d(
                &t(&x, &[b, c, h, h]),
                &t(&wt, &[o, c, k, k]),
                None,
                stride,
                pad,
            )
            .unwrap();
            assert_eq!(y.dims(), &[b, o, ho, wo]);
            let got = to_vec_f64(&y).unwrap();
            for (g, e) in got.iter().zip(&expected) {
                assert!((g - e).abs() < 1e-10, "k={k} s={stride}: {g} vs {e}");
            }
        }
    }

    #[test]
    fn conv2d_input_gradient_matches_finite_differences() {
        for &(b, c, h, o, k, stride, pad) in &[(2, 2, 6, 3, 3, 1, 1), (1, 3, 7, 2, 5, 2, 2)] {
            let x = pseudo(b * c * h * h, 5);
            let wt = pseudo(o * c * k * k, 6);
            let (_, ho, wo) = conv_ref(&x, (b, c, h, h), &wt, (o, k), stride, pad);
            let r = pseudo(b * o * ho * wo, 7);
            let loss = |x: &[f64]| -> f64 {
                let (y, _, _) = conv_ref(x, (b, c, h, h), &wt, (o, k), stride, pad);
                y.iter().zip(&r).map(|(a, b)| a * b).sum()
            };
            let xt = candle_core::Var::from_tensor(&t(&x, &[b, c, h, h])).unwrap();
            let y = conv2d(xt.as_tensor(), &t(&wt, &[o, c, k, k]), None, stride, pad).unwrap();
            let l = (y * t(&r, &[b, o, ho, wo])).unwrap().sum_all().unwrap();
            let g = l.backward().unwrap();
            let analytic = to_vec_f64(g.get(xt.as_tensor()).unwrap()).unwrap();
            for i in (0..x.len()).step_by(7) {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += 1e-4;
                xm[i] -= 1e-4;
                let fd = (loss(&xp) - loss(&xm)) / 2e-4;
                assert!((fd - analytic[i]).abs() < 1e-8, "{fd} vs {}", analytic[i]);
            }
        }
    }

    #[test]
    fn pixel_shuffle_matches_torch_layout() {
        // channel index = c * r^2 + i * r + j goes to output (h*r + i, w*r + j)
        let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let y = pixel_shuffle(&t(&data, &[1, 4, 2, 2]), 2).unwrap();
        let got = to_vec_f64(&y).unwrap();
        assert_eq!(
            got,
            vec![
                0., 4., 1., 5., 8., 12., 9., 13., 2., 6., 3., 7., 10., 14., 11., 15.
            ]
        );
    }

    #[test]
    fn softmax_rows_sum_to_one_and_handle_large_values() {
        let x = t(&[1000.0, 1001.0, 999.0, -5.0, 0.0, 5.0], &[2, 3]);
        let s = to_vec_f64(&softmax_last(&x).unwrap()).unwrap();
        assert!((s[0] + s[1] + s[2] - 1.0).abs() < 1e-12);
        assert!((s[3] + s[4] + s[5] - 1.0).abs() < 1e-12);
        let ls = to_vec_f64(&log_softmax_last(&x).unwrap()).unwrap();
        for (a, b) in ls.iter().zip(&s) {
            assert!((a.exp() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_insert_places_values_on_even_grid() {
        let y = zero_insert2(&t(&[1., 2., 3., 4.], &[1, 1, 2, 2])).unwrap();
        assert_eq!(
            to_vec_f64(&y).unwrap(),
            vec![1., 0., 2., 0., 0., 0., 0., 0., 3., 0., 4., 0., 0., 0., 0., 0.]
        );
    }

    #[test]
    fn layer_norm_standardises() {
        let x = t(&[1., 2., 3., 4.], &[1, 4]);
        let g = t(&[1.; 4], &[4]);
        let b = t(&[0.; 4], &[4]);
        let y = to_vec_f64(&layer_norm(&x, &g, &b, 0.0).unwrap()).unwrap();
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        let var: f64 = y.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-12);
    }
}
