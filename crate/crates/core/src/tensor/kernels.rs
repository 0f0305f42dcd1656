//! Raster kernels on N,C,H,W tensors: strided zero-padded convolution, block
//! mean pooling and nearest upsampling, each with its adjoint.

use crate::error::{Error, Result};
use crate::par;
use crate::real::Real;

use super::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new<T: Real>(
        x: &Tensor<T>,
        weight: &Tensor<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (n, c_in, h, w) = x.nchw()?;
        let (c_out, wc, kh, kw) = weight.nchw()?;
        if wc != c_in {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: input has {c_in}, kernel expects {wc}"
            )));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::shape(format!(
                "conv2d kernel must be square with odd extent, got {kh}x{kw}"
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be at least 1"));
        }
        let k = kh;
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape(format!(
                "conv2d output extent < 1 for {h}x{w} input, k={k}, pad={pad}"
            )));
        }
        Ok(ConvGeometry {
            n,
            c_in,
            c_out,
            h,
            w,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        })
    }

    /// Output positions `o` in `0..out` with `0 <= o*stride + tap - pad < len`.
    #[inline]
    fn valid_range(&self, tap: usize, len: usize, out: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > tap {
            (self.pad - tap).div_ceil(s).min(out)
        } else {
            0
        };
        let hi = if len + self.pad > tap {
            ((len - 1 + self.pad - tap) / s + 1).min(out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

/// Unfolds one image into `[C*k*k, h_out*w_out]` rows, zero outside the
/// input. Row `(c*k + ky)*k + kx` holds the tap `(ky, kx)` of channel `c`.
fn im2col<T: Real>(g: &ConvGeometry, img: &[T]) -> Vec<T> {
    let plane = g.h_out * g.w_out;
    let mut cols = vec![T::zero(); g.c_in * g.k * g.k * plane];
    for c in 0..g.c_in {
        let xp = &img[c * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.k {
            let (y0, y1) = g.valid_range(ky, g.h, g.h_out);
            for kx in 0..g.k {
                let (x0, x1) = g.valid_range(kx, g.w, g.w_out);
                if x0 == x1 {
                    continue;
                }
                let row = &mut cols[((c * g.k + ky) * g.k + kx) * plane..][..plane];
                for oy in y0..y1 {
                    let src = &xp[(oy * g.stride + ky - g.pad) * g.w..][..g.w];
                    let dst = &mut row[oy * g.w_out..][..g.w_out];
                    if g.stride == 1 {
                        dst[x0..x1].copy_from_slice(&src[x0 + kx - g.pad..x1 + kx - g.pad]);
                    } else {
                        for ox in x0..x1 {
                            dst[ox] = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`] restricted to channel `c`: accumulates the rows
/// of that channel into its `h x w` plane.
fn col2im_plane<T: Real>(g: &ConvGeometry, cols: &[T], c: usize, acc: &mut [T]) {
    let plane = g.h_out * g.w_out;
    for ky in 0..g.k {
        let (y0, y1) = g.valid_range(ky, g.h, g.h_out);
        for kx in 0..g.k {
            let (x0, x1) = g.valid_range(kx, g.w, g.w_out);
            if x0 == x1 {
                continue;
            }
            let row = &cols[((c * g.k + ky) * g.k + kx) * plane..][..plane];
            for oy in y0..y1 {
                let src = &row[oy * g.w_out..][..g.w_out];
                let dst = &mut acc[(oy * g.stride + ky - g.pad) * g.w..][..g.w];
                if g.stride == 1 {
                    add_into(&src[x0..x1], &mut dst[x0 + kx - g.pad..x1 + kx - g.pad]);
                } else {
                    for ox in x0..x1 {
                        let ix = ox * g.stride + kx - g.pad;
                        dst[ix] = dst[ix] + src[ox];
                    }
                }
            }
        }
    }
}

/// `out[n,o,y,x] = sum_{c,ky,kx} w[o,c,ky,kx] * x[n,c,y*s+ky-pad, x*s+kx-pad]`
/// with zeros outside the input.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(x, weight, stride, pad)?;
    let plane = g.h_out * g.w_out;
    let rows = g.c_in * g.k * g.k;
    let xd = x.data();
    let wd = weight.data();
    let cols = par::map_range(g.n, |b| im2col(&g, &xd[b * g.c_in * g.h * g.w..][..g.c_in * g.h * g.w]));
    let mut out = vec![T::zero(); g.n * g.c_out * plane];
    par::for_each_chunk(&mut out, plane, |idx, acc| {
        let (b, o) = (idx / g.c_out, idx % g.c_out);
        let wrow = &wd[o * rows..][..rows];
        for (r, &wv) in wrow.iter().enumerate() {
            if wv != T::zero() {
                axpy(wv, &cols[b][r * plane..][..plane], acc);
            }
        }
    });
    Tensor::new(&[g.n, g.c_out, g.h_out, g.w_out], out)
}

/// Gradients of [`conv2d`] with respect to its input and its kernel. Either
/// can be skipped.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
    grad_out: &Tensor<T>,
    need_input: bool,
    need_weight: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let g = ConvGeometry::new(x, weight, stride, pad)?;
    if grad_out.dims() != [g.n, g.c_out, g.h_out, g.w_out] {
        return Err(Error::shape(format!(
            "conv2d grad_out {:?} does not match output [{}, {}, {}, {}]",
            grad_out.dims(),
            g.n,
            g.c_out,
            g.h_out,
            g.w_out
        )));
    }
    let xd = x.data();
    let wd = weight.data();
    let gd = grad_out.data();
    let plane = g.h_out * g.w_out;
    let rows = g.c_in * g.k * g.k;
    let img = g.c_in * g.h * g.w;

    let grad_x = if need_input {
        // gcols[b][r, :] = sum_o w[o, r] * gout[b, o, :]
        let mut gcols = vec![T::zero(); g.n * rows * plane];
        par::for_each_chunk(&mut gcols, plane, |idx, acc| {
            let (b, r) = (idx / rows, idx % rows);
            for o in 0..g.c_out {
                let wv = wd[o * rows + r];
                if wv != T::zero() {
                    axpy(wv, &gd[(b * g.c_out + o) * plane..][..plane], acc);
                }
            }
        });
        let mut gx = vec![T::zero(); x.len()];
        par::for_each_chunk(&mut gx, g.h * g.w, |idx, acc| {
            let (b, c) = (idx / g.c_in, idx % g.c_in);
            col2im_plane(&g, &gcols[b * rows * plane..][..rows * plane], c, acc);
        });
        Some(Tensor::new(x.dims(), gx)?)
    } else {
        None
    };

    let grad_w = if need_weight {
        let cols = par::map_range(g.n, |b| im2col(&g, &xd[b * img..][..img]));
        let mut gw = vec![T::zero(); weight.len()];
        par::for_each_chunk(&mut gw, rows, |o, acc| {
            for (b, cb) in cols.iter().enumerate() {
                let gp = &gd[(b * g.c_out + o) * plane..][..plane];
                for (r, slot) in acc.iter_mut().enumerate() {
                    *slot = *slot + dot(gp, &cb[r * plane..][..plane]);
                }
            }
        });
        Some(Tensor::new(weight.dims(), gw)?)
    } else {
        None
    };

    Ok((grad_x, grad_w))
}

#[inline]
fn add_into<T: Real>(x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + xv;
    }
}

/// `y += a * x` over equal-length slices.
#[inline]
fn axpy<T: Real>(a: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + a * xv;
    }
}

/// Dot product with eight independent partial sums, combined in a fixed
/// order so results do not depend on scheduling.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (pa, pb) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            lanes[l] = lanes[l] + pa[l] * pb[l];
        }
    }
    let mut s = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        s = s + x * y;
    }
    lanes.iter().fold(T::zero(), |acc, &v| acc + v) + s
}

fn pool_factor(levels: u32) -> Result<usize> {
    1usize
        .checked_shl(levels)
        .filter(|&f| f <= 1 << 16)
        .ok_or_else(|| Error::invalid(format!("downscale level {levels} too large")))
}

/// Non-overlapping `2^levels x 2^levels` mean pooling over the last two axes.
pub fn resize_avg<T: Real>(x: &Tensor<T>, levels: u32) -> Result<Tensor<T>> {
    let f = pool_factor(levels)?;
    if f == 1 {
        return Ok(x.clone());
    }
    let (h, w) = x.hw()?;
    if h % f != 0 || w % f != 0 {
        return Err(Error::shape(format!(
            "extents {h}x{w} not divisible by pooling factor {f}"
        )));
    }
    let (ho, wo) = (h / f, w / f);
    let planes = x.len() / (h * w);
    let inv = T::one() / T::of((f * f) as f64);
    let xd = x.data();
    let mut out = vec![T::zero(); planes * ho * wo];
    par::for_each_chunk(&mut out, ho * wo, |p, acc| {
        let xp = &xd[p * h * w..][..h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = T::zero();
                for dy in 0..f {
                    let row = &xp[(oy * f + dy) * w + ox * f..][..f];
                    for &v in row {
                        s = s + v;
                    }
                }
                acc[oy * wo + ox] = s * inv;
            }
        }
    });
    let mut dims = x.dims().to_vec();
    let r = dims.len();
    dims[r - 2] = ho;
    dims[r - 1] = wo;
    Tensor::new(&dims, out)
}

/// Adjoint of [`resize_avg`]: every input cell receives `1/f^2` of its block's
/// output gradient.
pub fn resize_avg_backward<T: Real>(
    grad_out: &Tensor<T>,
    input_dims: &[usize],
    levels: u32,
) -> Result<Tensor<T>> {
    let f = pool_factor(levels)?;
    if f == 1 {
        return Ok(grad_out.clone());
    }
    let r = input_dims.len();
    let (h, w) = (input_dims[r - 2], input_dims[r - 1]);
    let inv = T::one() / T::of((f * f) as f64);
    upsample_raw(grad_out, f, h, w, inv, input_dims)
}

/// Nearest-neighbour upsampling by an integer factor over the last two axes.
pub fn upsample_nearest<T: Real>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(Error::invalid("upsample factor must be positive"));
    }
    let (h, w) = x.hw()?;
    let mut dims = x.dims().to_vec();
    let r = dims.len();
    dims[r - 2] = h * factor;
    dims[r - 1] = w * factor;
    upsample_raw(x, factor, h * factor, w * factor, T::one(), &dims)
}

fn upsample_raw<T: Real>(
    x: &Tensor<T>,
    f: usize,
    h: usize,
    w: usize,
    scale: T,
    dims: &[usize],
) -> Result<Tensor<T>> {
    let (hi, wi) = x.hw()?;
    if hi * f != h || wi * f != w {
        return Err(Error::shape(format!(
            "cannot spread {hi}x{wi} over {h}x{w} by factor {f}"
        )));
    }
    let planes = x.len() / (hi * wi);
    let xd = x.data();
    let mut out = vec![T::zero(); planes * h * w];
    par::for_each_chunk(&mut out, h * w, |p, acc| {
        let xp = &xd[p * hi * wi..][..hi * wi];
        for y in 0..h {
            let src = &xp[(y / f) * wi..][..wi];
            let dst = &mut acc[y * w..][..w];
            for (xx, d) in dst.iter_mut().enumerate() {
                *d = src[xx / f] * scale;
            }
        }
    });
    Tensor::new(dims, out)
}

/// Adjoint of [`upsample_nearest`]: block sums.
pub fn upsample_nearest_backward<T: Real>(
    grad_out: &Tensor<T>,
    factor: usize,
) -> Result<Tensor<T>> {
    let levels = factor.trailing_zeros();
    if !factor.is_power_of_two() {
        return Err(Error::invalid("upsample factor must be a power of two"));
    }
    let pooled = resize_avg(grad_out, levels)?;
    let k = T::of((factor * factor) as f64);
    Ok(pooled.map(|v| v * k))
}

/// `x[n, c, ..] + bias[c]`.
pub fn add_channel_bias<T: Real>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c, h, w) = x.nchw()?;
    if bias.dims() != [c] {
        return Err(Error::shape(format!(
            "bias {:?} does not match {c} channels",
            bias.dims()
        )));
    }
    let plane = h * w;
    let bd = bias.data();
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let b = bd[i % c];
        chunk.iter_mut().for_each(|v| *v = *v + b);
    }
    Ok(out)
}

/// Gradient of [`add_channel_bias`] with respect to the bias.
pub fn channel_bias_grad<T: Real>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c, h, w) = grad_out.nchw()?;
    let mut g = vec![T::zero(); c];
    for (i, chunk) in grad_out.data().chunks(h * w).enumerate() {
        g[i % c] = g[i % c] + chunk.iter().fold(T::zero(), |s, &v| s + v);
    }
    Tensor::new(&[c], g)
}
