//! Central finite-difference checks of every analytic backward rule, run in
//! 64-bit precision.
//!
//! Each family reports the largest relative error
//! `|analytic - numeric| / max(|analytic|, |numeric|, floor)` over the
//! sampled elements. Points where the function has a kink inside the
//! difference stencil are skipped:
//! - for the deformable sampler, when a sampling coordinate moved by the
//!   perturbation lies within `kink_band` of an integer;
//! - elsewhere, when the third differences of a five-point stencil show a
//!   slope jump.

use std::fmt;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{sample_batch_pairs, LossConfig, LossVariant};
use crate::model::{ContextBlock, Model, ModelSpec};
use crate::sdc::{
    predict_params, sdc_backward_with, sdc_forward, sdc_forward_saved, Fault, ParamHead, SamplingGrid, SdcParams,
};
use crate::seed::{self, Rng as SeedRng};
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Random instances per suite.
    pub instances: usize,
    /// Finite-difference step.
    pub step: f64,
    /// Sampling coordinates closer than this to an integer are not checked.
    pub kink_band: f64,
    pub tolerance: f64,
    /// Magnitude floor of the relative-error denominator.
    pub floor: f64,
    /// Elements checked per tensor per instance (at most).
    pub samples: usize,
    /// Deliberate backward corruption for mutation testing.
    pub fault: Fault,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 0,
            instances: 20,
            step: 1e-4,
            kink_band: 1e-3,
            tolerance: 1e-5,
            floor: 1e-3,
            samples: 24,
            fault: Fault::None,
        }
    }
}

impl GradcheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 || self.samples == 0 {
            return Err(Error::invalid("gradcheck needs at least one instance and sample"));
        }
        if !(self.step > 0.0 && self.kink_band >= self.step) {
            return Err(Error::invalid("gradcheck needs 0 < step <= kink_band"));
        }
        if !(self.tolerance > 0.0 && self.floor > 0.0) {
            return Err(Error::invalid("tolerance and floor must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyResult {
    pub suite: String,
    pub family: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl FamilyResult {
    fn new(suite: &str, family: &str, tolerance: f64) -> Self {
        FamilyResult {
            suite: suite.into(),
            family: family.into(),
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
            tolerance,
        }
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err <= self.tolerance
    }

    fn record(&mut self, analytic: f64, numeric: f64, floor: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(floor);
        let e = (analytic - numeric).abs() / denom;
        self.checked += 1;
        // NaN must not compare as a pass
        if e.is_nan() || e > self.max_rel_err {
            self.max_rel_err = if e.is_nan() { f64::INFINITY } else { e };
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub families: Vec<FamilyResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        !self.families.is_empty() && self.families.iter().all(FamilyResult::passed)
    }

    pub fn family(&self, suite: &str, family: &str) -> Option<&FamilyResult> {
        self.families.iter().find(|f| f.suite == suite && f.family == family)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<10} {:<14} {:>8} {:>8} {:>12} {:>6}",
            "suite", "family", "checked", "skipped", "max_rel_err", "result"
        )?;
        for r in &self.families {
            writeln!(
                f,
                "{:<10} {:<14} {:>8} {:>8} {:>12.3e} {:>6}",
                r.suite,
                r.family,
                r.checked,
                r.skipped,
                r.max_rel_err,
                if r.passed() { "ok" } else { "FAIL" }
            )?;
        }
        write!(f, "overall: {}", if self.passed() { "ok" } else { "FAIL" })
    }
}

fn uniform(rng: &mut SeedRng, dims: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.random_range(lo..hi))
}

fn pick(rng: &mut SeedRng, len: usize, count: usize) -> Vec<usize> {
    let all: Vec<usize> = (0..len).collect();
    all.choose_multiple(rng, count.min(len)).copied().collect()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// True if some coordinate that differs between the two grids has an
/// integer within `band` of the segment it moved along.
fn crosses_kink(lo: &SamplingGrid<f64>, hi: &SamplingGrid<f64>, band: f64) -> bool {
    lo.coords().iter().zip(hi.coords()).any(|(&(ai, aj), &(bi, bj))| {
        let near = |a: f64, b: f64| {
            a != b && {
                let (l, h) = (a.min(b) - band, a.max(b) + band);
                l.ceil() <= h
            }
        };
        near(ai, bi) || near(aj, bj)
    })
}

// ---------------------------------------------------------------- sdc

struct SdcInstance {
    x: Tensor<f64>,
    p: SdcParams<f64>,
    head: ParamHead<f64>,
    gout: Tensor<f64>,
}

fn sdc_instance(rng: &mut SeedRng) -> SdcInstance {
    let n = rng.random_range(1..=2);
    let c = rng.random_range(1..=3);
    let co = rng.random_range(1..=3);
    let h = rng.random_range(3..=8);
    let w = rng.random_range(3..=8);
    let k = 3;
    let x = uniform(rng, &[n, c, h, w], -1.0, 1.0);
    let p = SdcParams {
        weight: uniform(rng, &[co, c, k, k], -1.0, 1.0),
        offsets: uniform(rng, &[n, 2 * k * k, h, w], -1.5, 1.5),
        dil_raw: uniform(rng, &[n, 2, h, w], -1.0, 1.5),
    };
    let head = ParamHead {
        offset_weight: uniform(rng, &[2 * k * k, c, 1, 1], -0.5, 0.5),
        offset_bias: uniform(rng, &[2 * k * k], -1.5, 1.5),
        dil_weight: uniform(rng, &[2, c, 1, 1], -0.5, 0.5),
        dil_bias: uniform(rng, &[2], -0.5, 1.0),
    };
    let gout = uniform(rng, &[n, co, h, w], -1.0, 1.0);
    SdcInstance { x, p, head, gout }
}

/// Families of the deformable sampler: input, kernel weight, sampling
/// coordinates (via the offset maps, whose gradient is the coordinate
/// gradient), dilation pre-activations, and the offset/dilation prediction
/// branches.
pub fn check_sdc(cfg: &GradcheckConfig) -> Result<Vec<FamilyResult>> {
    cfg.validate()?;
    let tol = cfg.tolerance;
    let mut input = FamilyResult::new("sdc", "input", tol);
    let mut weight = FamilyResult::new("sdc", "weight", tol);
    let mut coords = FamilyResult::new("sdc", "coords", tol);
    let mut dilation = FamilyResult::new("sdc", "dilation", tol);
    let mut offsets = FamilyResult::new("sdc", "offsets", tol);
    let h = cfg.step;
    let mut rng = seed::rng(cfg.seed, "gradcheck/sdc");

    for _ in 0..cfg.instances {
        let inst = sdc_instance(&mut rng);
        let loss = |x: &Tensor<f64>, p: &SdcParams<f64>| -> Result<f64> { Ok(dot(&sdc_forward(x, p)?, &inst.gout)) };
        let (_, saved) = sdc_forward_saved(&inst.x, &inst.p)?;
        let g = sdc_backward_with(&inst.x, &inst.p, &saved, &inst.gout, cfg.fault)?;

        // Input and weight: the output is linear in both.
        for i in pick(&mut rng, inst.x.len(), cfg.samples) {
            let mut xp = inst.x.clone();
            xp.data_mut()[i] += h;
            let mut xm = inst.x.clone();
            xm.data_mut()[i] -= h;
            let num = (loss(&xp, &inst.p)? - loss(&xm, &inst.p)?) / (2.0 * h);
            input.record(g.input.data()[i], num, cfg.floor);
        }
        for i in pick(&mut rng, inst.p.weight.len(), cfg.samples) {
            let mut pp = inst.p.clone();
            pp.weight.data_mut()[i] += h;
            let mut pm = inst.p.clone();
            pm.weight.data_mut()[i] -= h;
            let num = (loss(&inst.x, &pp)? - loss(&inst.x, &pm)?) / (2.0 * h);
            weight.record(g.weight.data()[i], num, cfg.floor);
        }

        // Parameter maps move sampling coordinates.
        let check_map = |fam: &mut FamilyResult,
                             analytic: &Tensor<f64>,
                             get: fn(&mut SdcParams<f64>) -> &mut Tensor<f64>,
                             rng: &mut SeedRng|
         -> Result<()> {
            let len = get(&mut inst.p.clone()).len();
            for i in pick(rng, len, cfg.samples) {
                let mut pp = inst.p.clone();
                get(&mut pp).data_mut()[i] += h;
                let mut pm = inst.p.clone();
                get(&mut pm).data_mut()[i] -= h;
                if crosses_kink(&SamplingGrid::new(&pm)?, &SamplingGrid::new(&pp)?, cfg.kink_band) {
                    fam.skipped += 1;
                    continue;
                }
                let num = (loss(&inst.x, &pp)? - loss(&inst.x, &pm)?) / (2.0 * h);
                fam.record(analytic.data()[i], num, cfg.floor);
            }
            Ok(())
        };
        check_map(&mut coords, &g.offsets, |p| &mut p.offsets, &mut rng)?;
        check_map(&mut dilation, &g.dil_raw, |p| &mut p.dil_raw, &mut rng)?;

        // Prediction branches, features = the layer input.
        let branch_loss = |head: &ParamHead<f64>| -> Result<f64> {
            let p = predict_params(&inst.x, &inst.p.weight, head)?;
            Ok(dot(&sdc_forward(&inst.x, &p)?, &inst.gout))
        };
        let bp = predict_params(&inst.x, &inst.p.weight, &inst.head)?;
        let (_, bsaved) = sdc_forward_saved(&inst.x, &bp)?;
        let bg = sdc_backward_with(&inst.x, &bp, &bsaved, &inst.gout, cfg.fault)?;
        let hg = inst.head.backward(&inst.x, &bg.offsets, &bg.dil_raw)?;
        type Field = fn(&mut ParamHead<f64>) -> &mut Tensor<f64>;
        let fields: [(Field, bool); 4] = [
            (|h| &mut h.offset_weight, false),
            (|h| &mut h.offset_bias, false),
            (|h| &mut h.dil_weight, true),
            (|h| &mut h.dil_bias, true),
        ];
        for (get, is_dil) in fields {
            let analytic = get(&mut hg.clone()).clone();
            for i in pick(&mut rng, analytic.len(), cfg.samples) {
                let mut hp = inst.head.clone();
                get(&mut hp).data_mut()[i] += h;
                let mut hm = inst.head.clone();
                get(&mut hm).data_mut()[i] -= h;
                let fam = if is_dil { &mut dilation } else { &mut offsets };
                let gp = SamplingGrid::new(&predict_params(&inst.x, &inst.p.weight, &hp)?)?;
                let gm = SamplingGrid::new(&predict_params(&inst.x, &inst.p.weight, &hm)?)?;
                if crosses_kink(&gm, &gp, cfg.kink_band) {
                    fam.skipped += 1;
                    continue;
                }
                let num = (branch_loss(&hp)? - branch_loss(&hm)?) / (2.0 * h);
                fam.record(analytic.data()[i], num, cfg.floor);
            }
        }
    }
    Ok(vec![input, weight, coords, dilation, offsets])
}

// ---------------------------------------------------------------- graphs

/// Five-point stencil around `x`: returns the central difference, or
/// `None` when the slopes jump inside the stencil.
fn stencil<F: FnMut(f64) -> Result<f64>>(x: f64, h: f64, mut f: F) -> Result<Option<f64>> {
    let v: Vec<f64> = [-2.0, -1.0, 0.0, 1.0, 2.0]
        .iter()
        .map(|&k| f(x + k * h))
        .collect::<Result<_>>()?;
    let s: Vec<f64> = (0..4).map(|i| (v[i + 1] - v[i]) / h).collect();
    let d2: Vec<f64> = (0..3).map(|i| s[i + 1] - s[i]).collect();
    let jump = (d2[1] - d2[0]).abs() + (d2[2] - d2[1]).abs();
    let central = (v[3] - v[1]) / (2.0 * h);
    let scale = 1.0f64.max(central.abs());
    Ok((jump <= 1e-7 * scale).then_some(central))
}

type Builder<'a> = dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId> + 'a;

fn eval(leaves: &[Tensor<f64>], build: &Builder) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = leaves.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    Ok(g.value(out).item())
}

/// Checks d(build)/d(leaf) for every leaf, sampling elements at random.
fn check_graph(
    fam: &mut FamilyResult,
    leaves: &[Tensor<f64>],
    build: &Builder,
    rng: &mut SeedRng,
    cfg: &GradcheckConfig,
) -> Result<()> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = leaves.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    let grads = g.backward(out)?;
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(ids[li]).expect("leaf requires grad");
        for i in pick(rng, leaf.len(), cfg.samples) {
            let base = leaf.data()[i];
            let num = stencil(base, cfg.step, |v| {
                let mut ls = leaves.to_vec();
                ls[li].data_mut()[i] = v;
                eval(&ls, build)
            })?;
            match num {
                Some(n) => fam.record(analytic.data()[i], n, cfg.floor),
                None => fam.skipped += 1,
            }
        }
    }
    Ok(())
}

/// Scalar probe `sum(G * y)` with a fixed random `G`.
fn probe(g: &mut Graph<f64>, y: NodeId, weights: &Tensor<f64>) -> Result<NodeId> {
    let w = g.constant(weights.clone());
    let m = g.mul(y, w)?;
    g.sum(m)
}

/// Tensor operations recorded on the graph.
pub fn check_ops(cfg: &GradcheckConfig) -> Result<Vec<FamilyResult>> {
    cfg.validate()?;
    let tol = cfg.tolerance;
    let mut rng = seed::rng(cfg.seed, "gradcheck/ops");
    let names = ["conv2d", "conv2d_s2", "bias_add", "add_mul", "relu", "softplus", "upsample", "resize_avg", "sdc_node"];
    let mut fams: Vec<FamilyResult> = names.iter().map(|n| FamilyResult::new("ops", n, tol)).collect();
    for _ in 0..cfg.instances {
        let n = rng.random_range(1..=2);
        let c = rng.random_range(1..=3);
        let co = rng.random_range(1..=3);
        let hh = 2 * rng.random_range(2..=4);
        let ww = 2 * rng.random_range(2..=4);
        let x = uniform(&mut rng, &[n, c, hh, ww], -1.0, 1.0);
        let w = uniform(&mut rng, &[co, c, 3, 3], -1.0, 1.0);
        let b = uniform(&mut rng, &[co], -1.0, 1.0);
        let g_same = uniform(&mut rng, &[n, co, hh, ww], -1.0, 1.0);
        let g_half = uniform(&mut rng, &[n, co, hh / 2, ww / 2], -1.0, 1.0);
        let g_in = uniform(&mut rng, &[n, c, hh, ww], -1.0, 1.0);
        let g_up = uniform(&mut rng, &[n, c, hh * 2, ww * 2], -1.0, 1.0);
        let g_pool = uniform(&mut rng, &[n, c, hh / 2, ww / 2], -1.0, 1.0);
        let x2 = uniform(&mut rng, &[n, c, hh, ww], -1.0, 1.0);

        check_graph(&mut fams[0], &[x.clone(), w.clone()], &|g, l| {
            let y = g.conv2d(l[0], l[1], 1, 1)?;
            probe(g, y, &g_same)
        }, &mut rng, cfg)?;
        check_graph(&mut fams[1], &[x.clone(), w.clone()], &|g, l| {
            let y = g.conv2d(l[0], l[1], 2, 1)?;
            probe(g, y, &g_half)
        }, &mut rng, cfg)?;
        check_graph(&mut fams[2], &[x.clone(), w.clone(), b.clone()], &|g, l| {
            let y = g.conv2d(l[0], l[1], 1, 1)?;
            let y = g.bias_add(y, l[2])?;
            probe(g, y, &g_same)
        }, &mut rng, cfg)?;
        check_graph(&mut fams[3], &[x.clone(), x2.clone()], &|g, l| {
            let s = g.add(l[0], l[1])?;
            let m = g.mul(s, l[1])?;
            let m = g.scale(m, 0.7)?;
            probe(g, m, &g_in)
        }, &mut rng, cfg)?;
        check_graph(&mut fams[4], std::slice::from_ref(&x), &|g, l| {
            let y = g.relu(l[0])?;
            probe(g, y, &g_in)
        }, &mut rng, cfg)?;
        check_graph(&mut fams[5], std::slice::from_ref(&x), &|g, l| {
            let y = g.scale(l[0], 3.0)?;
            let y = g.softplus(y)?;
            probe(g, y, &g_in)
        }, &mut rng, cfg)?;
        check_graph(&mut fams[6], std::slice::from_ref(&x), &|g, l| {
            let y = g.upsample_nearest(l[0], 2)?;
            probe(g, y, &g_up)
        }, &mut rng, cfg)?;
        check_graph(&mut fams[7], std::slice::from_ref(&x), &|g, l| {
            let y = g.resize_avg(l[0], 1)?;
            probe(g, y, &g_pool)
        }, &mut rng, cfg)?;

        // Deformable layer as a graph node, parameter maps predicted from
        // the input through 1x1 branches.
        let k = 3;
        let ow = uniform(&mut rng, &[2 * k * k, c, 1, 1], -0.3, 0.3);
        let ob = uniform(&mut rng, &[2 * k * k], -1.5, 1.5);
        let dw = uniform(&mut rng, &[2, c, 1, 1], -0.3, 0.3);
        let db = uniform(&mut rng, &[2], -0.5, 1.0);
        let build_sdc = |g: &mut Graph<f64>, l: &[NodeId]| -> Result<NodeId> {
            let off = g.conv2d(l[0], l[2], 1, 0)?;
            let off = g.bias_add(off, l[3])?;
            let dil = g.conv2d(l[0], l[4], 1, 0)?;
            let dil = g.bias_add(dil, l[5])?;
            let y = g.sdc(l[0], l[1], off, dil)?;
            probe(g, y, &g_same)
        };
        check_graph(&mut fams[8], &[x.clone(), w.clone(), ow, ob, dw, db], &build_sdc, &mut rng, cfg)?;
    }
    Ok(fams)
}

/// Loss nodes: mean squared error, scale-invariant, ranking and
/// multi-scale gradient matching.
pub fn check_losses(cfg: &GradcheckConfig) -> Result<Vec<FamilyResult>> {
    cfg.validate()?;
    let tol = cfg.tolerance;
    let mut rng = seed::rng(cfg.seed, "gradcheck/losses");
    let mut fams: Vec<FamilyResult> = ["mse", "si", "rank", "msg"]
        .iter()
        .map(|n| FamilyResult::new("losses", n, tol))
        .collect();
    for inst in 0..cfg.instances {
        let n = rng.random_range(1..=2);
        let hh = 8;
        let ww = 8;
        let pred = uniform(&mut rng, &[n, 1, hh, ww], 0.0, 3.0);
        let gt = Tensor::from_fn(&[n, 1, hh, ww], |_| {
            if rng.random_bool(0.5) {
                0.0
            } else {
                rng.random_range(0.5..4.0)
            }
        });
        let pairs = sample_batch_pairs(&gt, 64, 0.25, seed::derive_seed(cfg.seed, &format!("pairs/{inst}")))?;
        check_graph(&mut fams[0], std::slice::from_ref(&pred), &|g, l| g.mse(l[0], gt.clone()), &mut rng, cfg)?;
        check_graph(&mut fams[1], std::slice::from_ref(&pred), &|g, l| g.scale_invariant(l[0], gt.clone()), &mut rng, cfg)?;
        check_graph(&mut fams[2], std::slice::from_ref(&pred), &|g, l| g.rank(l[0], pairs.clone()), &mut rng, cfg)?;
        check_graph(&mut fams[3], std::slice::from_ref(&pred), &|g, l| g.gradient_matching(l[0], gt.clone(), &[1, 2, 4, 8]), &mut rng, cfg)?;
    }
    Ok(fams)
}

/// Whole-model gradients for both context blocks under every loss variant.
pub fn check_end_to_end(cfg: &GradcheckConfig) -> Result<Vec<FamilyResult>> {
    cfg.validate()?;
    let tol = cfg.tolerance;
    let mut rng = seed::rng(cfg.seed, "gradcheck/model");
    let mut fams = vec![
        FamilyResult::new("model", "conv", tol),
        FamilyResult::new("model", "sdc", tol),
    ];
    let variants = [LossVariant::MseOnly, LossVariant::Si, LossVariant::Rank, LossVariant::Msg];
    let rounds = cfg.instances.div_ceil(4).max(1);
    for round in 0..rounds {
        for (fi, ctx) in [ContextBlock::Conv, ContextBlock::Sdc].into_iter().enumerate() {
            let spec = ModelSpec {
                channels: vec![3, 4],
                context: ctx,
                output_scale: 2.0,
                ..ModelSpec::default()
            };
            let mut model = Model::<f64>::random(spec, seed::derive_seed(cfg.seed, &format!("model/{round}")))?;
            // Move sampling points off the integer lattice.
            if let Some(b) = model.param_mut("ctx.offset.bias") {
                *b = uniform(&mut rng, b.dims(), -0.9, 0.9);
            }
            if let Some(b) = model.param_mut("ctx.dil.bias") {
                *b = uniform(&mut rng, b.dims(), 0.0, 1.0);
            }
            let x = uniform(&mut rng, &[2, 3, 8, 8], 0.0, 1.0);
            let gt = Tensor::from_fn(&[2, 1, 8, 8], |_| {
                if rng.random_bool(0.6) {
                    0.0
                } else {
                    rng.random_range(1.0..5.0)
                }
            });
            let loss_cfg = LossConfig::with_variant(variants[round % variants.len()]);
            let pair_seed = seed::derive_seed(cfg.seed, &format!("model-pairs/{round}"));
            let leaves: Vec<Tensor<f64>> = model.params().iter().map(|(_, t)| t.clone()).collect();
            let build = |g: &mut Graph<f64>, l: &[NodeId]| -> Result<NodeId> {
                let xi = g.constant(x.clone());
                let y = model.forward_graph(g, l, xi)?;
                g.loss_total(y, &gt, &loss_cfg, pair_seed)
            };
            check_graph(&mut fams[fi], &leaves, &build, &mut rng, cfg)?;
        }
    }
    Ok(fams)
}

/// Every suite in order: sdc, ops, losses, model.
pub fn run_all(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut families = check_sdc(cfg)?;
    families.extend(check_ops(cfg)?);
    families.extend(check_losses(cfg)?);
    families.extend(check_end_to_end(cfg)?);
    Ok(GradcheckReport { families })
}
