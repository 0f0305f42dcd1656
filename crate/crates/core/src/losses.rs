//! Training objectives: pixel-wise MSE plus an optional relative-height term
//! (scale-invariant residual variance, ordinal ranking, or multi-scale
//! gradient matching).
//!
//! Rasters are `[N, 1, H, W]` batches (or a single `[H, W]`-like raster).
//! Each loss is evaluated per image and averaged over images. Residuals are
//! `R = gt - pred` in raw height units.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::{sigmoid, softplus, Real};
use crate::seed;
use crate::tensor::{resize_avg, resize_avg_backward, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    #[default]
    MseOnly,
    Si,
    Rank,
    Msg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub variant: LossVariant,
    /// Ordinal pairs drawn per image per step.
    pub rank_pairs: usize,
    /// Height difference (meters) beyond which a pair is ordered.
    pub rank_threshold: f64,
    /// Downsampling denominators of the gradient-matching pyramid.
    pub msg_scales: Vec<u32>,
    /// Weight of the relative term.
    pub relative_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            variant: LossVariant::MseOnly,
            rank_pairs: 512,
            rank_threshold: 0.25,
            msg_scales: vec![1, 2, 4, 8],
            relative_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn with_variant(variant: LossVariant) -> Self {
        LossConfig {
            variant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rank_threshold > 0.0) {
            return Err(Error::invalid("rank_threshold must be positive"));
        }
        if self.rank_pairs == 0 {
            return Err(Error::invalid("rank_pairs must be at least 1"));
        }
        scale_levels(&self.msg_scales)?;
        if !self.relative_weight.is_finite() || self.relative_weight < 0.0 {
            return Err(Error::invalid("relative_weight must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Converts downsampling denominators (1, 2, 4, ...) to pooling levels.
pub fn scale_levels(scales: &[u32]) -> Result<Vec<u32>> {
    if scales.is_empty() {
        return Err(Error::invalid("msg_scales must not be empty"));
    }
    scales
        .iter()
        .map(|&s| {
            if s.is_power_of_two() {
                Ok(s.trailing_zeros())
            } else {
                Err(Error::invalid(format!(
                    "msg scale 1/{s} is not a power-of-two downsampling"
                )))
            }
        })
        .collect()
}

/// Splits a raster batch into `(images, planes per image, h, w)`.
pub(crate) fn layout<T: Real>(t: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match *t.dims() {
        [n, c, h, w] => Ok((n, c, h, w)),
        [c, h, w] => Ok((1, c, h, w)),
        [h, w] => Ok((1, 1, h, w)),
        [m] => Ok((1, 1, 1, m)),
        _ => Err(Error::shape(format!("unsupported raster {:?}", t.dims()))),
    }
}

fn same_shape<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape(format!(
            "prediction {:?} and ground truth {:?} differ",
            pred.dims(),
            gt.dims()
        )));
    }
    Ok(())
}

/// Evaluates `per_image` on every image and averages.
fn per_image_mean<T: Real>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    per_image: impl Fn(&[T], &[T]) -> Result<T>,
) -> Result<T> {
    same_shape(pred, gt)?;
    let (n, ..) = layout(pred)?;
    let m = pred.len() / n;
    let mut acc = T::zero();
    for b in 0..n {
        acc = acc + per_image(&pred.data()[b * m..][..m], &gt.data()[b * m..][..m])?;
    }
    Ok(acc / T::of(n as f64))
}

fn per_image_grad<T: Real>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    per_image: impl Fn(&[T], &[T], &mut [T]) -> Result<()>,
) -> Result<Tensor<T>> {
    same_shape(pred, gt)?;
    let (n, ..) = layout(pred)?;
    let m = pred.len() / n;
    let mut g = vec![T::zero(); pred.len()];
    for b in 0..n {
        per_image(
            &pred.data()[b * m..][..m],
            &gt.data()[b * m..][..m],
            &mut g[b * m..][..m],
        )?;
    }
    let inv = T::one() / T::of(n as f64);
    g.iter_mut().for_each(|v| *v = *v * inv);
    Tensor::new(pred.dims(), g)
}

// ---- MSE -------------------------------------------------------------------

pub fn mse_kernel<T: Real>(pred: &[T], gt: &[T]) -> T {
    let s = pred
        .iter()
        .zip(gt)
        .fold(T::zero(), |s, (&p, &y)| s + (y - p) * (y - p));
    s / T::of(pred.len() as f64)
}

pub fn loss_mse<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<T> {
    per_image_mean(pred, gt, |p, y| Ok(mse_kernel(p, y)))
}

pub fn loss_mse_grad<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<Tensor<T>> {
    per_image_grad(pred, gt, |p, y, g| {
        let k = T::of(2.0 / p.len() as f64);
        for ((gv, &pv), &yv) in g.iter_mut().zip(p).zip(y) {
            *gv = k * (pv - yv);
        }
        Ok(())
    })
}

// ---- scale-invariant ---------------------------------------------------------

/// `(1/n) sum R^2 - (1/n^2) (sum R)^2`. Shared by the loss and the SI-RMSE
/// metric.
pub fn si_kernel<T: Real>(pred: &[T], gt: &[T]) -> Result<T> {
    if pred.is_empty() {
        return Err(Error::invalid("scale-invariant loss of an empty raster"));
    }
    let n = T::of(pred.len() as f64);
    let (sq, lin) = pred
        .iter()
        .zip(gt)
        .fold((T::zero(), T::zero()), |(sq, lin), (&p, &y)| {
            let r = y - p;
            (sq + r * r, lin + r)
        });
    Ok(sq / n - (lin * lin) / (n * n))
}

pub fn loss_si<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<T> {
    per_image_mean(pred, gt, si_kernel)
}

pub fn loss_si_grad<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<Tensor<T>> {
    per_image_grad(pred, gt, |p, y, g| {
        let n = T::of(p.len() as f64);
        let total = p.iter().zip(y).fold(T::zero(), |s, (&pv, &yv)| s + (yv - pv));
        let two = T::of(2.0);
        for ((gv, &pv), &yv) in g.iter_mut().zip(p).zip(y) {
            // dL/dR_i = 2R_i/n - 2(sum R)/n^2, and dR/dpred = -1.
            *gv = -(two * (yv - pv) / n - two * total / (n * n));
        }
        Ok(())
    })
}

// ---- ordinal ranking -----------------------------------------------------------

/// Two pixel indices of one image and their ground-truth order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OrdinalPair {
    pub i: usize,
    pub j: usize,
    /// `+1` if pixel `i` is higher by more than the threshold, `-1` if `j`
    /// is, `0` otherwise.
    pub label: i8,
}

impl OrdinalPair {
    pub fn labelled<T: Real>(gt: &[T], i: usize, j: usize, threshold: f64) -> Self {
        let d = (gt[i] - gt[j]).as_f64();
        let label = if d > threshold {
            1
        } else if -d > threshold {
            -1
        } else {
            0
        };
        OrdinalPair { i, j, label }
    }
}

/// Draws `count` uniformly random pixel pairs (`i != j` when possible) for
/// one image and labels them from `gt`.
pub fn sample_pairs<T: Real, R: Rng>(
    gt: &[T],
    count: usize,
    threshold: f64,
    rng: &mut R,
) -> Vec<OrdinalPair> {
    let n = gt.len();
    (0..count)
        .map(|_| {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n);
            if n > 1 {
                while j == i {
                    j = rng.random_range(0..n);
                }
            }
            OrdinalPair::labelled(gt, i, j, threshold)
        })
        .collect()
}

/// Per-image pair sets for a batch, drawn from the stream `(seed, "rank")`.
pub fn sample_batch_pairs<T: Real>(
    gt: &Tensor<T>,
    count: usize,
    threshold: f64,
    seed: u64,
) -> Result<Vec<Vec<OrdinalPair>>> {
    let (n, ..) = layout(gt)?;
    let m = gt.len() / n;
    let mut rng = seed::rng(seed, "rank-pairs");
    Ok((0..n)
        .map(|b| sample_pairs(&gt.data()[b * m..][..m], count, threshold, &mut rng))
        .collect())
}

#[inline]
fn rank_term<T: Real>(d: T, label: i8) -> (T, T) {
    match label {
        1 => (softplus(-d), -sigmoid(-d)),
        -1 => (softplus(d), sigmoid(d)),
        _ => (d * d, T::of(2.0) * d),
    }
}

fn check_pairs<T>(pred: &[T], pairs: &[OrdinalPair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::invalid("ranking loss needs at least one pair"));
    }
    if let Some(p) = pairs.iter().find(|p| p.i >= pred.len() || p.j >= pred.len()) {
        return Err(Error::invalid(format!(
            "pair ({}, {}) out of range for {} pixels",
            p.i,
            p.j,
            pred.len()
        )));
    }
    Ok(())
}

/// Mean ranking loss of one image.
pub fn rank_kernel<T: Real>(pred: &[T], pairs: &[OrdinalPair]) -> Result<T> {
    check_pairs(pred, pairs)?;
    let s = pairs.iter().fold(T::zero(), |s, p| {
        s + rank_term(pred[p.i] - pred[p.j], p.label).0
    });
    Ok(s / T::of(pairs.len() as f64))
}

/// Ranking loss of a single raster.
pub fn loss_rank<T: Real>(pred: &Tensor<T>, pairs: &[OrdinalPair]) -> Result<T> {
    rank_kernel(pred.data(), pairs)
}

/// Ranking loss of a batch, one pair set per image.
pub fn loss_rank_batch<T: Real>(pred: &Tensor<T>, pairs: &[Vec<OrdinalPair>]) -> Result<T> {
    let (n, ..) = layout(pred)?;
    if pairs.len() != n {
        return Err(Error::invalid(format!(
            "{} pair sets for {n} images",
            pairs.len()
        )));
    }
    let m = pred.len() / n;
    let mut acc = T::zero();
    for (b, set) in pairs.iter().enumerate() {
        acc = acc + rank_kernel(&pred.data()[b * m..][..m], set)?;
    }
    Ok(acc / T::of(n as f64))
}

pub fn loss_rank_batch_grad<T: Real>(
    pred: &Tensor<T>,
    pairs: &[Vec<OrdinalPair>],
) -> Result<Tensor<T>> {
    let (n, ..) = layout(pred)?;
    if pairs.len() != n {
        return Err(Error::invalid(format!(
            "{} pair sets for {n} images",
            pairs.len()
        )));
    }
    let m = pred.len() / n;
    let mut g = vec![T::zero(); pred.len()];
    for (b, set) in pairs.iter().enumerate() {
        let p = &pred.data()[b * m..][..m];
        check_pairs(p, set)?;
        let k = T::one() / T::of((set.len() * n) as f64);
        let gb = &mut g[b * m..][..m];
        for pair in set {
            let (_, d) = rank_term(p[pair.i] - p[pair.j], pair.label);
            gb[pair.i] = gb[pair.i] + d * k;
            gb[pair.j] = gb[pair.j] - d * k;
        }
    }
    Tensor::new(pred.dims(), g)
}

// ---- multi-scale gradient matching -----------------------------------------------

fn abs_forward_differences<T: Real>(r: &[T], h: usize, w: usize) -> T {
    let mut s = T::zero();
    for y in 0..h {
        for x in 0..w {
            let v = r[y * w + x];
            if x + 1 < w {
                s = s + (r[y * w + x + 1] - v).abs();
            }
            if y + 1 < h {
                s = s + (r[(y + 1) * w + x] - v).abs();
            }
        }
    }
    s
}

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn check_pyramid(h: usize, w: usize, levels: &[u32]) -> Result<()> {
    let max = levels.iter().copied().max().unwrap_or(0);
    let f = 1usize << max;
    if !h.is_multiple_of(f) || !w.is_multiple_of(f) {
        return Err(Error::shape(format!(
            "{h}x{w} raster is not divisible by the coarsest scale 1/{f}"
        )));
    }
    Ok(())
}

/// `(1/M) sum_k sum_i (|dx R^k_i| + |dy R^k_i|)` over the pyramid of one
/// `h x w` plane, with forward differences and `M = h * w`. Shared by the
/// loss and the MSGE metric.
pub fn msg_kernel<T: Real>(pred: &[T], gt: &[T], h: usize, w: usize, scales: &[u32]) -> Result<T> {
    let levels = scale_levels(scales)?;
    check_pyramid(h, w, &levels)?;
    let r = Tensor::new(
        &[h, w],
        gt.iter().zip(pred).map(|(&y, &p)| y - p).collect(),
    )?;
    let mut total = T::zero();
    for &lvl in &levels {
        let rk = resize_avg(&r, lvl)?;
        let (hk, wk) = rk.hw()?;
        total = total + abs_forward_differences(rk.data(), hk, wk);
    }
    Ok(total / T::of((h * w) as f64))
}

fn msg_kernel_grad<T: Real>(
    pred: &[T],
    gt: &[T],
    h: usize,
    w: usize,
    levels: &[u32],
    out: &mut [T],
) -> Result<()> {
    let r = Tensor::new(
        &[h, w],
        gt.iter().zip(pred).map(|(&y, &p)| y - p).collect(),
    )?;
    let inv_m = T::one() / T::of((h * w) as f64);
    for &lvl in levels {
        let rk = resize_avg(&r, lvl)?;
        let (hk, wk) = rk.hw()?;
        let d = rk.data();
        let mut gk = vec![T::zero(); d.len()];
        for y in 0..hk {
            for x in 0..wk {
                let v = d[y * wk + x];
                if x + 1 < wk {
                    let s = sign(d[y * wk + x + 1] - v) * inv_m;
                    gk[y * wk + x + 1] = gk[y * wk + x + 1] + s;
                    gk[y * wk + x] = gk[y * wk + x] - s;
                }
                if y + 1 < hk {
                    let s = sign(d[(y + 1) * wk + x] - v) * inv_m;
                    gk[(y + 1) * wk + x] = gk[(y + 1) * wk + x] + s;
                    gk[y * wk + x] = gk[y * wk + x] - s;
                }
            }
        }
        let gr = resize_avg_backward(&Tensor::new(&[hk, wk], gk)?, &[h, w], lvl)?;
        // dR/dpred = -1
        for (o, &g) in out.iter_mut().zip(gr.data()) {
            *o = *o - g;
        }
    }
    Ok(())
}

pub fn loss_msg<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, scales: &[u32]) -> Result<T> {
    let (_, c, h, w) = layout(pred)?;
    per_image_mean(pred, gt, |p, y| {
        let mut s = T::zero();
        for ch in 0..c {
            let q = h * w;
            s = s + msg_kernel(&p[ch * q..][..q], &y[ch * q..][..q], h, w, scales)?;
        }
        Ok(s)
    })
}

pub fn loss_msg_grad<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, scales: &[u32]) -> Result<Tensor<T>> {
    let (_, c, h, w) = layout(pred)?;
    let levels = scale_levels(scales)?;
    check_pyramid(h, w, &levels)?;
    per_image_grad(pred, gt, |p, y, g| {
        let q = h * w;
        for ch in 0..c {
            msg_kernel_grad(
                &p[ch * q..][..q],
                &y[ch * q..][..q],
                h,
                w,
                &levels,
                &mut g[ch * q..][..q],
            )?;
        }
        Ok(())
    })
}

// ---- combined ----------------------------------------------------------------

/// `L_mse + weight * L_rel`. The ranking variant draws its pairs from
/// `pair_seed`.
pub fn loss_total<T: Real>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    cfg: &LossConfig,
    pair_seed: u64,
) -> Result<T> {
    cfg.validate()?;
    let mse = loss_mse(pred, gt)?;
    let rel = match cfg.variant {
        LossVariant::MseOnly => return Ok(mse),
        LossVariant::Si => loss_si(pred, gt)?,
        LossVariant::Msg => loss_msg(pred, gt, &cfg.msg_scales)?,
        LossVariant::Rank => {
            let pairs = sample_batch_pairs(gt, cfg.rank_pairs, cfg.rank_threshold, pair_seed)?;
            loss_rank_batch(pred, &pairs)?
        }
    };
    Ok(mse + T::of(cfg.relative_weight) * rel)
}
