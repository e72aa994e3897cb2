//! Forward and adjoint kernels for the dense operators used by the networks.
//!
//! Everything here works on plain [`Tensor`]s; the differentiable wrappers in
//! [`super::graph`] call into these.

use rayon::prelude::*;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Work (multiply-adds) below which convolutions stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 18;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub h: usize,
    pub w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (c_in, h, w) = match *input {
            [c, h, w] => (c, h, w),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("input must be (C, H, W), got {:?}", input),
                ))
            }
        };
        let (c_out, kc, k) = match *kernel {
            [o, i, kh, kw] if kh == kw => (o, i, kh),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel must be (C_out, C_in, k, k), got {:?}", kernel),
                ))
            }
        };
        if kc != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels but kernel expects {}", c_in, kc),
            ));
        }
        if stride == 0 || k == 0 {
            return Err(Error::InvalidArgument(
                "conv2d stride and kernel size must be >= 1".into(),
            ));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "kernel {} larger than padded input {}x{} (pad {})",
                    k, h, w, pad
                ),
            ));
        }
        Ok(ConvGeometry {
            c_in,
            c_out,
            k,
            h,
            w,
            out_h: (h + 2 * pad - k) / stride + 1,
            out_w: (w + 2 * pad - k) / stride + 1,
            stride,
            pad,
        })
    }

    fn work(&self) -> usize {
        self.c_in * self.c_out * self.k * self.k * self.out_h * self.out_w
    }

    /// Output columns `ox` for which input column `ox*stride + kx - pad` is inside the image.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        range_for(kx, self.pad, self.stride, self.w, self.out_w)
    }

    fn valid_rows(&self, ky: usize) -> (usize, usize) {
        range_for(ky, self.pad, self.stride, self.h, self.out_h)
    }
}

/// Half-open range of output indices `o` with `0 <= o*stride + off - pad < len`.
fn range_for(off: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = if off >= pad {
        0
    } else {
        (pad - off).div_ceil(stride)
    };
    // o*stride + off - pad <= len - 1  <=>  o <= (len - 1 + pad - off) / stride
    let hi = if len + pad > off {
        ((len - 1 + pad - off) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// 2-D cross-correlation with zero padding.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.numel() != g.c_out {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "bias has {} entries, kernel has {} outputs",
                    b.numel(),
                    g.c_out
                ),
            ));
        }
    }
    let plane = g.out_h * g.out_w;
    let mut out = vec![0.0; g.c_out * plane];
    let x = input.data();
    let wt = kernel.data();

    let body = |(co, dst): (usize, &mut [f64])| {
        if let Some(b) = bias {
            dst.fill(b.data()[co]);
        }
        for ci in 0..g.c_in {
            let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.k {
                let (oy0, oy1) = g.valid_rows(ky);
                for kx in 0..g.k {
                    let wv = wt[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = g.valid_cols(kx);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let row = &src[iy * g.w..(iy + 1) * g.w];
                        let drow = &mut dst[oy * g.out_w + ox0..oy * g.out_w + ox1];
                        if g.stride == 1 {
                            let ix0 = ox0 + kx - g.pad;
                            for (d, s) in drow.iter_mut().zip(&row[ix0..ix0 + (ox1 - ox0)]) {
                                *d += wv * s;
                            }
                        } else {
                            for (i, d) in drow.iter_mut().enumerate() {
                                *d += wv * row[(ox0 + i) * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    };
    if g.work() >= PAR_THRESHOLD {
        out.par_chunks_mut(plane).enumerate().for_each(body);
    } else {
        out.chunks_mut(plane).enumerate().for_each(body);
    }
    Tensor::from_vec(&[g.c_out, g.out_h, g.out_w], out)
}

/// Adjoint of [`conv2d`] with respect to its input.
pub fn conv2d_grad_input(grad_out: &Tensor, kernel: &Tensor, g: &ConvGeometry) -> Tensor {
    let in_plane = g.h * g.w;
    let out_plane = g.out_h * g.out_w;
    let mut gx = vec![0.0; g.c_in * in_plane];
    let go = grad_out.data();
    let wt = kernel.data();

    let body = |(ci, dst): (usize, &mut [f64])| {
        for co in 0..g.c_out {
            let src = &go[co * out_plane..(co + 1) * out_plane];
            for ky in 0..g.k {
                let (oy0, oy1) = g.valid_rows(ky);
                for kx in 0..g.k {
                    let wv = wt[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = g.valid_cols(kx);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let grow = &src[oy * g.out_w + ox0..oy * g.out_w + ox1];
                        let drow = &mut dst[iy * g.w..(iy + 1) * g.w];
                        if g.stride == 1 {
                            let ix0 = ox0 + kx - g.pad;
                            for (d, s) in drow[ix0..ix0 + (ox1 - ox0)].iter_mut().zip(grow) {
                                *d += wv * s;
                            }
                        } else {
                            for (i, s) in grow.iter().enumerate() {
                                drow[(ox0 + i) * g.stride + kx - g.pad] += wv * s;
                            }
                        }
                    }
                }
            }
        }
    };
    if g.work() >= PAR_THRESHOLD {
        gx.par_chunks_mut(in_plane).enumerate().for_each(body);
    } else {
        gx.chunks_mut(in_plane).enumerate().for_each(body);
    }
    Tensor::from_vec(&[g.c_in, g.h, g.w], gx).expect("geometry-consistent shape")
}

/// Adjoint of [`conv2d`] with respect to its kernel.
pub fn conv2d_grad_kernel(grad_out: &Tensor, input: &Tensor, g: &ConvGeometry) -> Tensor {
    let per_out = g.c_in * g.k * g.k;
    let out_plane = g.out_h * g.out_w;
    let mut gw = vec![0.0; g.c_out * per_out];
    let go = grad_out.data();
    let x = input.data();

    let body = |(co, dst): (usize, &mut [f64])| {
        let gsrc = &go[co * out_plane..(co + 1) * out_plane];
        for ci in 0..g.c_in {
            let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.k {
                let (oy0, oy1) = g.valid_rows(ky);
                for kx in 0..g.k {
                    let (ox0, ox1) = g.valid_cols(kx);
                    let mut acc = 0.0;
                    if ox0 < ox1 {
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let row = &src[iy * g.w..(iy + 1) * g.w];
                            let grow = &gsrc[oy * g.out_w + ox0..oy * g.out_w + ox1];
                            if g.stride == 1 {
                                let ix0 = ox0 + kx - g.pad;
                                acc += grow
                                    .iter()
                                    .zip(&row[ix0..ix0 + (ox1 - ox0)])
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            } else {
                                for (i, gv) in grow.iter().enumerate() {
                                    acc += gv * row[(ox0 + i) * g.stride + kx - g.pad];
                                }
                            }
                        }
                    }
                    dst[(ci * g.k + ky) * g.k + kx] = acc;
                }
            }
        }
    };
    if g.work() >= PAR_THRESHOLD {
        gw.par_chunks_mut(per_out).enumerate().for_each(body);
    } else {
        gw.chunks_mut(per_out).enumerate().for_each(body);
    }
    Tensor::from_vec(&[g.c_out, g.c_in, g.k, g.k], gw).expect("geometry-consistent shape")
}

/// Per-channel sums of a `(C, H, W)` tensor; the bias adjoint of a convolution.
pub fn channel_sums(t: &Tensor) -> Tensor {
    let c = t.shape()[0];
    let plane = t.numel() / c.max(1);
    let sums = t.data().chunks(plane).map(|ch| ch.iter().sum()).collect();
    Tensor::from_vec(&[c], sums).expect("one sum per channel")
}

/// Sub-pixel rearrangement: `out[c, h*r + i, w*r + j] = in[c*r*r + i*r + j, h, w]`.
pub fn pixel_shuffle(input: &Tensor, r: usize) -> Result<Tensor> {
    let (c, h, w) = input.dims3("pixel_shuffle")?;
    if r == 0 || c % (r * r) != 0 {
        return Err(Error::shape(
            "pixel_shuffle",
            format!("{} channels not divisible by r^2 = {}", c, r * r),
        ));
    }
    let co = c / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![0.0; input.numel()];
    let x = input.data();
    for oc in 0..co {
        for i in 0..r {
            for j in 0..r {
                let src_c = oc * r * r + i * r + j;
                for y in 0..h {
                    let src = &x[(src_c * h + y) * w..(src_c * h + y + 1) * w];
                    let base = (oc * oh + y * r + i) * ow + j;
                    for (xx, v) in src.iter().enumerate() {
                        out[base + xx * r] = *v;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[co, oh, ow], out)
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle(input: &Tensor, r: usize) -> Result<Tensor> {
    let (c, h, w) = input.dims3("pixel_unshuffle")?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::shape(
            "pixel_unshuffle",
            format!("{}x{} not divisible by r = {}", h, w, r),
        ));
    }
    let (ih, iw) = (h / r, w / r);
    let mut out = vec![0.0; input.numel()];
    let x = input.data();
    for oc in 0..c {
        for i in 0..r {
            for j in 0..r {
                let dst_c = oc * r * r + i * r + j;
                for y in 0..ih {
                    let base = (oc * h + y * r + i) * w + j;
                    let dst = &mut out[(dst_c * ih + y) * iw..(dst_c * ih + y + 1) * iw];
                    for (xx, d) in dst.iter_mut().enumerate() {
                        *d = x[base + xx * r];
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[c * r * r, ih, iw], out)
}

/// Multiplies every channel of `image` by a binary `(1, H, W)` mask.
pub fn masked_product(image: &Tensor, mask: &Tensor) -> Result<Tensor> {
    check_mask(image, mask)?;
    let (c, h, w) = image.dims3("masked_product")?;
    let m = mask.data();
    let plane = h * w;
    let mut out = image.clone();
    for ci in 0..c {
        for (o, mv) in out.data_mut()[ci * plane..(ci + 1) * plane]
            .iter_mut()
            .zip(m)
        {
            *o *= mv;
        }
    }
    Ok(out)
}

pub(crate) fn check_mask(image: &Tensor, mask: &Tensor) -> Result<()> {
    let (_, h, w) = image.dims3("masked_product")?;
    if mask.shape() != [1, h, w] {
        return Err(Error::shape(
            "masked_product",
            format!(
                "mask {:?} does not match image {:?}",
                mask.shape(),
                image.shape()
            ),
        ));
    }
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidArgument("mask values must be 0 or 1".into()));
    }
    Ok(())
}

/// Non-overlapping `k x k` average pooling of a `(C, H, W)` tensor.
pub fn avg_pool(input: &Tensor, k: usize) -> Result<Tensor> {
    let (c, h, w) = input.dims3("avg_pool")?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::shape(
            "avg_pool",
            format!("{}x{} not divisible by {}", h, w, k),
        ));
    }
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    Ok(Tensor::from_fn3(c, oh, ow, |ci, y, x| {
        let mut s = 0.0;
        for dy in 0..k {
            for dx in 0..k {
                s += input.at3(ci, y * k + dy, x * k + dx);
            }
        }
        s * inv
    }))
}
