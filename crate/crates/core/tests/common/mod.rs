//! Reference implementations written straight from the definitions, with
//! no shared code paths into the library kernels.

#![allow(dead_code)]

use mhe_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.random_range(lo..hi))
}

/// max |a - b| / max(max |b|, floor).
pub fn rel_err(a: &Tensor<f64>, b: &Tensor<f64>, floor: f64) -> f64 {
    assert_eq!(a.dims(), b.dims());
    let scale = b.data().iter().fold(floor, |m, v| m.max(v.abs()));
    a.data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        / scale
}

fn at(t: &Tensor<f64>, idx: [usize; 4]) -> f64 {
    let d = t.dims();
    t.data()[((idx[0] * d[1] + idx[1]) * d[2] + idx[2]) * d[3] + idx[3]]
}

/// Zero-padded dilated cross-correlation, six nested loops plus taps.
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize, dil: usize) -> Tensor<f64> {
    let (n, c, h, wd) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    let (co, k) = (w.dims()[0], w.dims()[2]);
    let span = dil * (k - 1) + 1;
    let ho = (h + 2 * pad - span) / stride + 1;
    let wo = (wd + 2 * pad - span) / stride + 1;
    let mut out = vec![0.0; n * co * ho * wo];
    for b in 0..n {
        for o in 0..co {
            for i in 0..ho {
                for j in 0..wo {
                    let mut s = 0.0;
                    for ci in 0..c {
                        for a in 0..k {
                            for e in 0..k {
                                let y = (i * stride + a * dil) as isize - pad as isize;
                                let xx = (j * stride + e * dil) as isize - pad as isize;
                                if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                    s += at(w, [o, ci, a, e]) * at(x, [b, ci, y as usize, xx as usize]);
                                }
                            }
                        }
                    }
                    out[((b * co + o) * ho + i) * wo + j] = s;
                }
            }
        }
    }
    Tensor::new(&[n, co, ho, wo], out).unwrap()
}

/// Non-overlapping `f x f` block means over the last two axes.
pub fn block_mean(x: &Tensor<f64>, f: usize) -> Tensor<f64> {
    let d = x.dims();
    let (outer, h, w) = (d[..d.len() - 2].iter().product::<usize>(), d[d.len() - 2], d[d.len() - 1]);
    let (ho, wo) = (h / f, w / f);
    let mut out = Vec::with_capacity(outer * ho * wo);
    for o in 0..outer {
        for i in 0..ho {
            for j in 0..wo {
                let mut s = 0.0;
                for a in 0..f {
                    for b in 0..f {
                        s += x.data()[o * h * w + (i * f + a) * w + j * f + b];
                    }
                }
                out.push(s / (f * f) as f64);
            }
        }
    }
    let mut dims = d.to_vec();
    let r = dims.len();
    dims[r - 2] = ho;
    dims[r - 1] = wo;
    Tensor::new(&dims, out).unwrap()
}

pub fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

/// Scale-deformable sampling evaluated tap by tap: every input pixel is
/// weighted by the unit tent in both axes around the sampling point.
/// `offsets[b, 2t]` moves the column coordinate, `offsets[b, 2t + 1]` the
/// row coordinate; `dil_raw[b, 0]` and `[b, 1]` scale columns and rows.
pub fn tent_sdc(x: &Tensor<f64>, w: &Tensor<f64>, offsets: &Tensor<f64>, dil_raw: &Tensor<f64>) -> Tensor<f64> {
    let (n, c, h, wd) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    let (co, k) = (w.dims()[0], w.dims()[2]);
    let r = (k / 2) as f64;
    let mut out = vec![0.0; n * co * h * wd];
    for b in 0..n {
        for i in 0..h {
            for j in 0..wd {
                let eta_col = softplus(at(dil_raw, [b, 0, i, j]));
                let eta_row = softplus(at(dil_raw, [b, 1, i, j]));
                for a in 0..k {
                    for e in 0..k {
                        let t = a * k + e;
                        let col = j as f64 + eta_col * (e as f64 - r) + at(offsets, [b, 2 * t, i, j]);
                        let row = i as f64 + eta_row * (a as f64 - r) + at(offsets, [b, 2 * t + 1, i, j]);
                        for o in 0..co {
                            let mut s = 0.0;
                            for ci in 0..c {
                                for u in 0..h {
                                    for v in 0..wd {
                                        let g = (1.0 - (row - u as f64).abs()).max(0.0)
                                            * (1.0 - (col - v as f64).abs()).max(0.0);
                                        s += at(w, [o, ci, a, e]) * g * at(x, [b, ci, u, v]);
                                    }
                                }
                            }
                            out[((b * co + o) * h + i) * wd + j] += s;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, co, h, wd], out).unwrap()
}

pub fn mse(pred: &[f64], gt: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..pred.len() {
        s += (gt[i] - pred[i]) * (gt[i] - pred[i]);
    }
    s / pred.len() as f64
}

pub fn mae(pred: &[f64], gt: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..pred.len() {
        s += (gt[i] - pred[i]).abs();
    }
    s / pred.len() as f64
}

pub fn si(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len() as f64;
    let (mut s1, mut s2) = (0.0, 0.0);
    for i in 0..pred.len() {
        let r = gt[i] - pred[i];
        s1 += r;
        s2 += r * r;
    }
    s2 / n - s1 * s1 / (n * n)
}

/// Gradient matching over the given downsampling denominators, divided
/// by the full-resolution pixel count.
pub fn msg(pred: &[f64], gt: &[f64], h: usize, w: usize, scales: &[usize]) -> f64 {
    let r: Vec<f64> = (0..h * w).map(|i| gt[i] - pred[i]).collect();
    let rt = Tensor::new(&[1, 1, h, w], r).unwrap();
    let mut total = 0.0;
    for &s in scales {
        let rs = block_mean(&rt, s);
        let (hs, ws) = (h / s, w / s);
        let v = rs.data();
        for i in 0..hs {
            for j in 0..ws {
                if j + 1 < ws {
                    total += (v[i * ws + j + 1] - v[i * ws + j]).abs();
                }
                if i + 1 < hs {
                    total += (v[(i + 1) * ws + j] - v[i * ws + j]).abs();
                }
            }
        }
    }
    total / (h * w) as f64
}

pub fn rank_term(label: i8, d: f64) -> f64 {
    match label {
        1 => (1.0 + (-d).exp()).ln(),
        -1 => (1.0 + d.exp()).ln(),
        _ => d * d,
    }
}
