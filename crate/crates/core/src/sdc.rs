//! Scale-deformable convolution.
//!
//! Each output pixel `p0 = (x0, y0)` reads its `k x k` taps at
//!
//! ```text
//! p_i = x0 + eta_i * t_i + dp_i      (column axis)
//! p_j = y0 + eta_j * t_j + dp_j      (row axis)
//! ```
//!
//! where `t = (t_i, t_j)` is the tap's position relative to the kernel
//! centre, `eta = softplus(dil_raw)` is a per-pixel dilation multiplier
//! shared by all taps and channels, and `dp` is a per-tap offset in pixels.
//! Values are read with the bilinear kernel `max(0, 1 - |p - v|)` per axis,
//! so anything outside the raster contributes zero. With `eta = 1` and
//! `dp = 0` the operator is a stride-1 convolution with `k/2` zero padding.
//!
//! Channel layout of the per-pixel parameter maps:
//! - `offsets[n, 2t]` is `dp_i` (column) and `offsets[n, 2t + 1]` is `dp_j`
//!   (row) of tap `t = ky * k + kx`;
//! - `dil_raw[n, 0]` drives `eta_i`, `dil_raw[n, 1]` drives `eta_j`.
//!
//! The backward pass is fully analytic. Bilinear derivatives use the
//! piecewise slope `g(v, p) = 0` if `|v - p| >= 1`, `+1` if `v >= p`, `-1`
//! otherwise; at integer coordinates this picks `+1` for the coinciding
//! grid point.

use crate::error::{Error, Result};
use crate::par;
use crate::real::{sigmoid, softplus, softplus_inv, Real};
use crate::tensor::kernels::{add_channel_bias, channel_bias_grad};
use crate::tensor::{conv2d, conv2d_backward, Tensor};

/// Kernel weights and per-pixel sampling parameters of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SdcParams<T> {
    /// `[Co, C, k, k]`
    pub weight: Tensor<T>,
    /// `[N, 2k^2, H, W]`, pixels.
    pub offsets: Tensor<T>,
    /// `[N, 2, H, W]`, pre-softplus dilation multipliers.
    pub dil_raw: Tensor<T>,
}

impl<T: Real> SdcParams<T> {
    /// Parameters that make the layer an ordinary convolution.
    pub fn standard(weight: Tensor<T>, n: usize, h: usize, w: usize) -> Result<Self> {
        let (_, _, k, _) = weight.nchw()?;
        Ok(SdcParams {
            offsets: Tensor::zeros(&[n, 2 * k * k, h, w]),
            dil_raw: Tensor::full(&[n, 2, h, w], T::of(softplus_inv(1.0))),
            weight,
        })
    }

    /// Dilation multipliers `eta = softplus(dil_raw)`.
    pub fn eta(&self) -> Tensor<T> {
        self.dil_raw.map(softplus)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    n: usize,
    c: usize,
    co: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl Geometry {
    fn taps(&self) -> usize {
        self.k * self.k
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }

    fn tap_offset(&self, tap: usize) -> (isize, isize) {
        let r = (self.k / 2) as isize;
        ((tap % self.k) as isize - r, (tap / self.k) as isize - r)
    }
}

fn validate<T: Real>(x: &Tensor<T>, p: &SdcParams<T>) -> Result<Geometry> {
    let (n, c, h, w) = x.nchw()?;
    let (co, wc, kh, kw) = p.weight.nchw()?;
    if wc != c {
        return Err(Error::shape(format!(
            "sdc channel mismatch: input has {c}, kernel expects {wc}"
        )));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::shape(format!(
            "sdc kernel must be square with odd extent, got {kh}x{kw}"
        )));
    }
    let k = kh;
    if p.offsets.dims() != [n, 2 * k * k, h, w] {
        return Err(Error::shape(format!(
            "offsets must be [{n}, {}, {h}, {w}], got {:?}",
            2 * k * k,
            p.offsets.dims()
        )));
    }
    if p.dil_raw.dims() != [n, 2, h, w] {
        return Err(Error::shape(format!(
            "dil_raw must be [{n}, 2, {h}, {w}], got {:?}",
            p.dil_raw.dims()
        )));
    }
    for (name, t) in [
        ("weight", &p.weight),
        ("offsets", &p.offsets),
        ("dil_raw", &p.dil_raw),
    ] {
        if !t.all_finite() {
            return Err(Error::NonFinite(format!("sdc parameter {name}")));
        }
    }
    Ok(Geometry { n, c, co, h, w, k })
}

/// Sampling coordinates `(p_i, p_j)` for every image, tap and output pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingGrid<T> {
    n: usize,
    taps: usize,
    h: usize,
    w: usize,
    coords: Vec<(T, T)>,
}

impl<T: Real> SamplingGrid<T> {
    pub fn new(p: &SdcParams<T>) -> Result<Self> {
        let (_, _, k, _) = p.weight.nchw()?;
        let (n, _, h, w) = p.dil_raw.nchw()?;
        let taps = k * k;
        if p.offsets.dims() != [n, 2 * taps, h, w] {
            return Err(Error::shape("offsets do not match dil_raw extents"));
        }
        let r = (k / 2) as isize;
        let plane = h * w;
        let od = p.offsets.data();
        let dd = p.dil_raw.data();
        let mut coords = Vec::with_capacity(n * taps * plane);
        for b in 0..n {
            let eta_i = &dd[(b * 2) * plane..][..plane];
            let eta_j = &dd[(b * 2 + 1) * plane..][..plane];
            for tap in 0..taps {
                let ti = T::of(((tap % k) as isize - r) as f64);
                let tj = T::of(((tap / k) as isize - r) as f64);
                let off_i = &od[(b * 2 * taps + 2 * tap) * plane..][..plane];
                let off_j = &od[(b * 2 * taps + 2 * tap + 1) * plane..][..plane];
                for y in 0..h {
                    for x in 0..w {
                        let q = y * w + x;
                        let pi = T::of(x as f64) + softplus(eta_i[q]) * ti + off_i[q];
                        let pj = T::of(y as f64) + softplus(eta_j[q]) * tj + off_j[q];
                        coords.push((pi, pj));
                    }
                }
            }
        }
        Ok(SamplingGrid {
            n,
            taps,
            h,
            w,
            coords,
        })
    }

    /// `(p_i, p_j)` of `tap` for output pixel `(y, x)` of image `b`.
    pub fn get(&self, b: usize, tap: usize, y: usize, x: usize) -> (T, T) {
        self.coords[((b * self.taps + tap) * self.h + y) * self.w + x]
    }

    /// All coordinates, image-major then tap, row, column.
    pub fn coords(&self) -> &[(T, T)] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    fn at(&self, b: usize, tap: usize) -> &[(T, T)] {
        let plane = self.h * self.w;
        &self.coords[(b * self.taps + tap) * plane..][..plane]
    }
}

/// Bilinear weights and slopes of the two grid points bracketing `p` on one
/// axis. Indices outside `0..len` are `None`.
#[derive(Debug, Clone, Copy)]
struct AxisTaps<T> {
    idx: [Option<usize>; 2],
    weight: [T; 2],
    slope: [T; 2],
}

impl<T: Real> AxisTaps<T> {
    #[inline]
    fn new(p: T, len: usize) -> Self {
        let none = AxisTaps {
            idx: [None, None],
            weight: [T::zero(); 2],
            slope: [T::zero(); 2],
        };
        // Beyond one pixel outside the raster nothing is in reach.
        if !(p > -T::one() && p < T::of(len as f64)) {
            return none;
        }
        let fl = p.floor();
        let v0 = fl.as_f64() as isize;
        let d = p - fl;
        let in_range = |v: isize| (v >= 0 && (v as usize) < len).then_some(v as usize);
        // g(v0, p): v0 >= p only when p sits exactly on v0.
        let g0 = if d == T::zero() { T::one() } else { -T::one() };
        // g(v0 + 1, p): |v1 - p| = 1 - d, which reaches 1 only when d == 0.
        let g1 = if d == T::zero() { T::zero() } else { T::one() };
        AxisTaps {
            idx: [in_range(v0), in_range(v0 + 1)],
            weight: [T::one() - d, d],
            slope: [g0, g1],
        }
    }
}

/// Bilinear read of `plane` at column `pi`, row `pj`.
#[inline]
fn sample<T: Real>(plane: &[T], w: usize, ci: &AxisTaps<T>, rj: &AxisTaps<T>) -> T {
    let mut s = T::zero();
    for a in 0..2 {
        let Some(row) = rj.idx[a] else { continue };
        for b in 0..2 {
            let Some(col) = ci.idx[b] else { continue };
            s = s + plane[row * w + col] * rj.weight[a] * ci.weight[b];
        }
    }
    s
}

/// Derivatives of [`sample`] with respect to `(pi, pj)`. Differences along
/// the moving axis are formed first, so a locally constant field gives
/// exactly zero.
#[inline]
fn sample_grad<T: Real>(plane: &[T], w: usize, ci: &AxisTaps<T>, rj: &AxisTaps<T>) -> (T, T) {
    let mut v = [[T::zero(); 2]; 2];
    for a in 0..2 {
        let Some(row) = rj.idx[a] else { continue };
        for b in 0..2 {
            if let Some(col) = ci.idx[b] {
                v[a][b] = plane[row * w + col];
            }
        }
    }
    let mut di = T::zero();
    let mut dj = T::zero();
    for a in 0..2 {
        di = di + rj.weight[a] * (ci.slope[0] * v[a][0] + ci.slope[1] * v[a][1]);
        dj = dj + ci.weight[a] * (rj.slope[0] * v[0][a] + rj.slope[1] * v[1][a]);
    }
    (di, dj)
}

/// Forward intermediates needed by [`sdc_backward`].
#[derive(Debug, Clone)]
pub struct SdcSaved<T> {
    geometry: Geometry,
    grid: SamplingGrid<T>,
    /// Sampled values, `[N][C][tap][pixel]`.
    columns: Vec<T>,
}

impl<T: Real> SdcSaved<T> {
    pub fn grid(&self) -> &SamplingGrid<T> {
        &self.grid
    }
}

/// Gradients of a scalar loss with respect to every operator input.
#[derive(Debug, Clone, PartialEq)]
pub struct SdcGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub offsets: Tensor<T>,
    pub dil_raw: Tensor<T>,
}

/// Deliberate corruptions of the backward rule, used to prove that the
/// gradient checks are able to fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    #[default]
    None,
    /// Negates `d p / d eta = t` in the dilation chain rule.
    FlipDilationChain,
}

pub fn sdc_forward<T: Real>(x: &Tensor<T>, p: &SdcParams<T>) -> Result<Tensor<T>> {
    sdc_forward_saved(x, p).map(|(y, _)| y)
}

/// Forward pass that also returns the intermediates for the backward pass.
pub fn sdc_forward_saved<T: Real>(
    x: &Tensor<T>,
    p: &SdcParams<T>,
) -> Result<(Tensor<T>, SdcSaved<T>)> {
    let g = validate(x, p)?;
    let grid = SamplingGrid::new(p)?;
    let (taps, plane) = (g.taps(), g.plane());
    let xd = x.data();

    let mut columns = vec![T::zero(); g.n * g.c * taps * plane];
    par::for_each_chunk(&mut columns, taps * plane, |idx, col| {
        let b = idx / g.c;
        let xp = &xd[idx * plane..][..plane];
        for tap in 0..taps {
            let dst = &mut col[tap * plane..][..plane];
            for (d, &(pi, pj)) in dst.iter_mut().zip(grid.at(b, tap)) {
                let ci = AxisTaps::new(pi, g.w);
                let rj = AxisTaps::new(pj, g.h);
                *d = sample(xp, g.w, &ci, &rj);
            }
        }
    });

    let wd = p.weight.data();
    let mut out = vec![T::zero(); g.n * g.co * plane];
    par::for_each_chunk(&mut out, plane, |idx, acc| {
        let (b, o) = (idx / g.co, idx % g.co);
        for c in 0..g.c {
            let wk = &wd[(o * g.c + c) * taps..][..taps];
            let cols = &columns[(b * g.c + c) * taps * plane..][..taps * plane];
            for (tap, &wv) in wk.iter().enumerate() {
                if wv == T::zero() {
                    continue;
                }
                for (a, &v) in acc.iter_mut().zip(&cols[tap * plane..][..plane]) {
                    *a = *a + wv * v;
                }
            }
        }
    });

    let y = Tensor::new(&[g.n, g.co, g.h, g.w], out)?;
    Ok((
        y,
        SdcSaved {
            geometry: g,
            grid,
            columns,
        },
    ))
}

pub fn sdc_backward<T: Real>(
    x: &Tensor<T>,
    p: &SdcParams<T>,
    saved: &SdcSaved<T>,
    grad_out: &Tensor<T>,
) -> Result<SdcGrads<T>> {
    sdc_backward_with(x, p, saved, grad_out, Fault::None)
}

pub fn sdc_backward_with<T: Real>(
    x: &Tensor<T>,
    p: &SdcParams<T>,
    saved: &SdcSaved<T>,
    grad_out: &Tensor<T>,
    fault: Fault,
) -> Result<SdcGrads<T>> {
    let g = validate(x, p)?;
    if saved.geometry != g
        || saved.columns.len() != g.n * g.c * g.taps() * g.plane()
        || saved.grid.len() != g.n * g.taps() * g.plane()
    {
        return Err(Error::Graph(
            "saved sdc intermediates do not belong to these inputs".into(),
        ));
    }
    if grad_out.dims() != [g.n, g.co, g.h, g.w] {
        return Err(Error::shape(format!(
            "sdc grad_out {:?} does not match output [{}, {}, {}, {}]",
            grad_out.dims(),
            g.n,
            g.co,
            g.h,
            g.w
        )));
    }
    let (taps, plane) = (g.taps(), g.plane());
    let xd = x.data();
    let wd = p.weight.data();
    let gd = grad_out.data();
    let grid = &saved.grid;

    // Column gradients: dL/dcol[n, c, tap, q] = sum_o w[o, c, tap] * gout[n, o, q].
    let mut gcols = vec![T::zero(); g.n * g.c * taps * plane];
    par::for_each_chunk(&mut gcols, taps * plane, |idx, acc| {
        let (b, c) = (idx / g.c, idx % g.c);
        for o in 0..g.co {
            let gp = &gd[(b * g.co + o) * plane..][..plane];
            let wk = &wd[(o * g.c + c) * taps..][..taps];
            for (tap, &wv) in wk.iter().enumerate() {
                if wv == T::zero() {
                    continue;
                }
                for (a, &gv) in acc[tap * plane..][..plane].iter_mut().zip(gp) {
                    *a = *a + wv * gv;
                }
            }
        }
    });

    let mut gw = vec![T::zero(); p.weight.len()];
    par::for_each_chunk(&mut gw, g.c * taps, |o, acc| {
        for b in 0..g.n {
            let gp = &gd[(b * g.co + o) * plane..][..plane];
            for c in 0..g.c {
                let cols = &saved.columns[(b * g.c + c) * taps * plane..][..taps * plane];
                for tap in 0..taps {
                    let s = gp
                        .iter()
                        .zip(&cols[tap * plane..][..plane])
                        .fold(T::zero(), |s, (&gv, &cv)| s + gv * cv);
                    acc[c * taps + tap] = acc[c * taps + tap] + s;
                }
            }
        }
    });

    // Input gradient: transpose of the bilinear read, one task per input plane.
    let mut gx = vec![T::zero(); x.len()];
    par::for_each_chunk(&mut gx, plane, |idx, acc| {
        let b = idx / g.c;
        let gc = &gcols[idx * taps * plane..][..taps * plane];
        for tap in 0..taps {
            for (&(pi, pj), &gv) in grid.at(b, tap).iter().zip(&gc[tap * plane..][..plane]) {
                if gv == T::zero() {
                    continue;
                }
                let ci = AxisTaps::new(pi, g.w);
                let rj = AxisTaps::new(pj, g.h);
                for a in 0..2 {
                    let Some(row) = rj.idx[a] else { continue };
                    for bb in 0..2 {
                        let Some(col) = ci.idx[bb] else { continue };
                        let slot = &mut acc[row * g.w + col];
                        *slot = *slot + gv * rj.weight[a] * ci.weight[bb];
                    }
                }
            }
        }
    });

    // Coordinate gradients per (image, tap, pixel).
    let mut gcoord = vec![(T::zero(), T::zero()); g.n * taps * plane];
    par::for_each_chunk(&mut gcoord, plane, |idx, acc| {
        let (b, tap) = (idx / taps, idx % taps);
        let coords = grid.at(b, tap);
        for c in 0..g.c {
            let xp = &xd[(b * g.c + c) * plane..][..plane];
            let gc = &gcols[((b * g.c + c) * taps + tap) * plane..][..plane];
            for q in 0..plane {
                let gv = gc[q];
                if gv == T::zero() {
                    continue;
                }
                let (pi, pj) = coords[q];
                let ci = AxisTaps::new(pi, g.w);
                let rj = AxisTaps::new(pj, g.h);
                let (di, dj) = sample_grad(xp, g.w, &ci, &rj);
                acc[q].0 = acc[q].0 + gv * di;
                acc[q].1 = acc[q].1 + gv * dj;
            }
        }
    });

    let mut goff = vec![T::zero(); p.offsets.len()];
    for b in 0..g.n {
        for tap in 0..taps {
            let src = &gcoord[(b * taps + tap) * plane..][..plane];
            let base = (b * 2 * taps + 2 * tap) * plane;
            for (q, &(gi, gj)) in src.iter().enumerate() {
                goff[base + q] = gi;
                goff[base + plane + q] = gj;
            }
        }
    }

    let chain_sign = match fault {
        Fault::None => T::one(),
        Fault::FlipDilationChain => -T::one(),
    };
    let dd = p.dil_raw.data();
    let mut gdil = vec![T::zero(); p.dil_raw.len()];
    for b in 0..g.n {
        for tap in 0..taps {
            let (ti, tj) = g.tap_offset(tap);
            let (ti, tj) = (T::of(ti as f64) * chain_sign, T::of(tj as f64) * chain_sign);
            let src = &gcoord[(b * taps + tap) * plane..][..plane];
            for (q, &(gi, gj)) in src.iter().enumerate() {
                gdil[(b * 2) * plane + q] = gdil[(b * 2) * plane + q] + gi * ti;
                gdil[(b * 2 + 1) * plane + q] = gdil[(b * 2 + 1) * plane + q] + gj * tj;
            }
        }
    }
    for (gv, &raw) in gdil.iter_mut().zip(dd) {
        *gv = *gv * sigmoid(raw);
    }

    Ok(SdcGrads {
        input: Tensor::new(x.dims(), gx)?,
        weight: Tensor::new(p.weight.dims(), gw)?,
        offsets: Tensor::new(p.offsets.dims(), goff)?,
        dil_raw: Tensor::new(p.dil_raw.dims(), gdil)?,
    })
}

/// Reference evaluation: for every output element, every channel and tap,
/// the bilinear kernel is summed over the whole input raster. Quadratic in
/// the raster size; meant for instances up to about 16x16.
pub fn sdc_oracle<T: Real>(x: &Tensor<T>, p: &SdcParams<T>) -> Result<Tensor<T>> {
    let g = validate(x, p)?;
    let kernel = |d: T| (T::one() - d.abs()).max(T::zero());
    let r = (g.k / 2) as f64;
    let mut out = Tensor::zeros(&[g.n, g.co, g.h, g.w]);
    let (xd, wd, od, dd) = (x.data(), p.weight.data(), p.offsets.data(), p.dil_raw.data());
    let taps = g.taps();
    let plane = g.plane();
    let od_idx = |b: usize, ch: usize, y: usize, xx: usize| ((b * 2 * taps + ch) * g.h + y) * g.w + xx;
    let dd_idx = |b: usize, ch: usize, y: usize, xx: usize| ((b * 2 + ch) * g.h + y) * g.w + xx;
    for b in 0..g.n {
        for o in 0..g.co {
            for y0 in 0..g.h {
                for x0 in 0..g.w {
                    let mut acc = T::zero();
                    for c in 0..g.c {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let tap = ky * g.k + kx;
                                let eta_i = softplus(dd[dd_idx(b, 0, y0, x0)]);
                                let eta_j = softplus(dd[dd_idx(b, 1, y0, x0)]);
                                let pi = T::of(x0 as f64)
                                    + eta_i * T::of(kx as f64 - r)
                                    + od[od_idx(b, 2 * tap, y0, x0)];
                                let pj = T::of(y0 as f64)
                                    + eta_j * T::of(ky as f64 - r)
                                    + od[od_idx(b, 2 * tap + 1, y0, x0)];
                                let mut v = T::zero();
                                for u in 0..g.h {
                                    for vv in 0..g.w {
                                        v = v + xd[(b * g.c + c) * plane + u * g.w + vv]
                                            * kernel(pi - T::of(vv as f64))
                                            * kernel(pj - T::of(u as f64));
                                    }
                                }
                                acc = acc + wd[(o * g.c + c) * taps + tap] * v;
                            }
                        }
                    }
                    out.data_mut()[((b * g.co + o) * g.h + y0) * g.w + x0] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Two 1x1 convolution branches that predict offsets and dilation
/// pre-activations from features aligned with the layer's output.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamHead<T> {
    /// `[2k^2, C, 1, 1]`
    pub offset_weight: Tensor<T>,
    /// `[2k^2]`
    pub offset_bias: Tensor<T>,
    /// `[2, C, 1, 1]`
    pub dil_weight: Tensor<T>,
    /// `[2]`
    pub dil_bias: Tensor<T>,
}

impl<T: Real> ParamHead<T> {
    /// Branches that output zero offsets and `eta = 1` for any input.
    pub fn identity(channels: usize, k: usize) -> Self {
        let n_off = 2 * k * k;
        ParamHead {
            offset_weight: Tensor::zeros(&[n_off, channels, 1, 1]),
            offset_bias: Tensor::zeros(&[n_off]),
            dil_weight: Tensor::zeros(&[2, channels, 1, 1]),
            dil_bias: Tensor::full(&[2], T::of(softplus_inv(1.0))),
        }
    }

    /// Returns `(offsets, dil_raw)`.
    pub fn predict(&self, features: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let offsets = add_channel_bias(
            &conv2d(features, &self.offset_weight, 1, 0)?,
            &self.offset_bias,
        )?;
        let dil_raw = add_channel_bias(&conv2d(features, &self.dil_weight, 1, 0)?, &self.dil_bias)?;
        Ok((offsets, dil_raw))
    }

    /// Gradients of the branch parameters given the gradients of their
    /// outputs, in field order.
    pub fn backward(
        &self,
        features: &Tensor<T>,
        grad_offsets: &Tensor<T>,
        grad_dil_raw: &Tensor<T>,
    ) -> Result<ParamHead<T>> {
        let (_, gow) = conv2d_backward(features, &self.offset_weight, 1, 0, grad_offsets, false, true)?;
        let (_, gdw) = conv2d_backward(features, &self.dil_weight, 1, 0, grad_dil_raw, false, true)?;
        Ok(ParamHead {
            offset_weight: gow.expect("requested"),
            offset_bias: channel_bias_grad(grad_offsets)?,
            dil_weight: gdw.expect("requested"),
            dil_bias: channel_bias_grad(grad_dil_raw)?,
        })
    }
}

/// Builds the layer parameters for `features` from the kernel weight and the
/// prediction branches.
pub fn predict_params<T: Real>(
    features: &Tensor<T>,
    weight: &Tensor<T>,
    head: &ParamHead<T>,
) -> Result<SdcParams<T>> {
    let (_, c, _, _) = features.nchw()?;
    let (_, hc, _, _) = head.offset_weight.nchw()?;
    let (_, dc, _, _) = head.dil_weight.nchw()?;
    if hc != c || dc != c {
        return Err(Error::shape(format!(
            "prediction branches expect {hc}/{dc} channels, features have {c}"
        )));
    }
    let (offsets, dil_raw) = head.predict(features)?;
    let (_, _, k, _) = weight.nchw()?;
    if offsets.dims()[1] != 2 * k * k {
        return Err(Error::shape(format!(
            "offset branch emits {} channels, kernel needs {}",
            offsets.dims()[1],
            2 * k * k
        )));
    }
    Ok(SdcParams {
        weight: weight.clone(),
        offsets,
        dil_raw,
    })
}
