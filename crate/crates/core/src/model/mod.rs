//! Encoder-decoder height regressor with a context block (scale-deformable
//! or standard convolution) between the encoder output and the decoder.
//!
//! ```text
//! image -> enc0 (s1) -> enc1 (s2) -> ... -> ctx -> up, dec, +skip -> ... -> head -> softplus * scale
//! ```

use std::collections::HashMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::metrics::Predictor;
use crate::real::{softplus_inv, Real};
use crate::seed;
use crate::synthdata::{DatasetManifest, Sample, Split};
use crate::tensor::{Graph, NodeId, Tensor};

pub mod checkpoint;

pub use checkpoint::Checkpoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ContextBlock {
    #[default]
    Sdc,
    Conv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub in_channels: usize,
    /// Channels per encoder stage; every stage after the first halves the
    /// resolution.
    pub channels: Vec<usize>,
    /// Kernel extent of the context block.
    pub kernel: usize,
    pub context: ContextBlock,
    /// Meters per unit of the softplus output.
    pub output_scale: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            in_channels: 3,
            channels: vec![8, 16, 32],
            kernel: 3,
            context: ContextBlock::Sdc,
            output_scale: 10.0,
        }
    }
}

impl ModelSpec {
    pub fn with_context(context: ContextBlock) -> Self {
        ModelSpec {
            context,
            ..Self::default()
        }
    }

    pub fn downsamples(&self) -> usize {
        self.channels.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) || self.in_channels == 0 {
            return Err(Error::invalid("model channels must be non-empty and positive"));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::invalid("context kernel must be odd"));
        }
        if !(self.output_scale > 0.0) {
            return Err(Error::invalid("output_scale must be positive"));
        }
        Ok(())
    }

    fn canonical(&self) -> String {
        format!(
            "in={};channels={:?};kernel={};context={:?};output_scale={:e}",
            self.in_channels, self.channels, self.kernel, self.context, self.output_scale
        )
    }

    /// 64-bit fingerprint of the architecture.
    pub fn fingerprint(&self) -> u64 {
        seed::fingerprint(self.canonical().as_bytes())
    }

    /// Ordered `(name, dims)` of every parameter.
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>)> {
        let c = &self.channels;
        let last = *c.last().expect("validated");
        let k = self.kernel;
        let mut out = Vec::new();
        let mut prev = self.in_channels;
        for (i, &ci) in c.iter().enumerate() {
            out.push((format!("enc{i}.weight"), vec![ci, prev, 3, 3]));
            out.push((format!("enc{i}.bias"), vec![ci]));
            prev = ci;
        }
        out.push(("ctx.weight".into(), vec![last, last, k, k]));
        out.push(("ctx.bias".into(), vec![last]));
        if self.context == ContextBlock::Sdc {
            out.push(("ctx.offset.weight".into(), vec![2 * k * k, last, 1, 1]));
            out.push(("ctx.offset.bias".into(), vec![2 * k * k]));
            out.push(("ctx.dil.weight".into(), vec![2, last, 1, 1]));
            out.push(("ctx.dil.bias".into(), vec![2]));
        }
        for i in (0..c.len() - 1).rev() {
            out.push((format!("dec{i}.weight"), vec![c[i], c[i + 1], 3, 3]));
            out.push((format!("dec{i}.bias"), vec![c[i]]));
        }
        out.push(("head.weight".into(), vec![1, c[0], 1, 1]));
        out.push(("head.bias".into(), vec![1]));
        out
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

/// How to initialise a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// Copy every tensor from a checkpoint.
    Full,
    /// He-normal convolution weights, zero biases, identity SDC branches.
    Random { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    spec: ModelSpec,
    params: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Real> Model<T> {
    pub fn random(spec: ModelSpec, init_seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = Vec::new();
        for (name, dims) in spec.parameter_layout() {
            let t = if name == "ctx.dil.bias" {
                Tensor::full(&dims, T::of(softplus_inv(1.0)))
            } else if name.starts_with("ctx.offset.") || name.starts_with("ctx.dil.") || name.ends_with(".bias") {
                Tensor::zeros(&dims)
            } else {
                let fan_in: usize = dims[1..].iter().product();
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                    .expect("positive std");
                let mut rng = seed::rng(init_seed, &format!("init/{name}"));
                Tensor::from_fn(&dims, |_| T::of(normal.sample(&mut rng)))
            };
            params.push((name, t));
        }
        Ok(Self::assemble(spec, params))
    }

    fn assemble(spec: ModelSpec, params: Vec<(String, Tensor<T>)>) -> Self {
        let index = params
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        Model {
            spec,
            params,
            index,
        }
    }

    /// Initialise from `ckpt` (`Full`) or from scratch (`Random`).
    pub fn init_from(spec: ModelSpec, ckpt: &Checkpoint<T>, mode: InitMode) -> Result<Self> {
        match mode {
            InitMode::Random { seed } => Self::random(spec, seed),
            InitMode::Full => Self::from_checkpoint(spec, ckpt),
        }
    }

    pub fn from_checkpoint(spec: ModelSpec, ckpt: &Checkpoint<T>) -> Result<Self> {
        spec.validate()?;
        if ckpt.fingerprint != spec.fingerprint() {
            return Err(Error::Checkpoint(format!(
                "fingerprint {:016x} does not match model {:016x} ({spec})",
                ckpt.fingerprint,
                spec.fingerprint()
            )));
        }
        let layout = spec.parameter_layout();
        if ckpt.tensors.len() != layout.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {}",
                ckpt.tensors.len(),
                layout.len()
            )));
        }
        let mut params = Vec::with_capacity(layout.len());
        for (name, dims) in layout {
            let t = ckpt
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.dims() != dims.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has dims {:?}, expected {dims:?}",
                    t.dims()
                )));
            }
            params.push((name, t.clone()));
        }
        Ok(Self::assemble(spec, params))
    }

    pub fn to_checkpoint(&self, train_seed: u64) -> Checkpoint<T> {
        Checkpoint {
            spec: self.spec.clone(),
            fingerprint: self.spec.fingerprint(),
            seed: train_seed,
            tensors: self.params.clone(),
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.params[i].1)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.params[i].1)
    }

    /// Registers every parameter as a leaf, in layout order.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|(_, t)| g.leaf(t.clone(), trainable))
            .collect()
    }

    /// Records the forward pass of `image` (`[N, 3, H, W]`) on `g`, using
    /// the leaves returned by [`Model::bind`]. Returns the `[N, 1, H, W]`
    /// prediction node.
    pub fn forward_graph(&self, g: &mut Graph<T>, ids: &[NodeId], image: NodeId) -> Result<NodeId> {
        let p = |name: &str| -> NodeId { ids[self.index[name]] };
        let (_, c, h, w) = g.value(image).nchw()?;
        if c != self.spec.in_channels {
            return Err(Error::shape(format!(
                "model expects {} input channels, got {c}",
                self.spec.in_channels
            )));
        }
        let f = 1usize << self.spec.downsamples();
        if h % f != 0 || w % f != 0 {
            return Err(Error::shape(format!(
                "input extents {h}x{w} not divisible by {f}"
            )));
        }
        let stages = self.spec.channels.len();

        let mut skips = Vec::with_capacity(stages);
        let mut x = image;
        for i in 0..stages {
            let stride = if i == 0 { 1 } else { 2 };
            let y = g.conv2d(x, p(&format!("enc{i}.weight")), stride, 1)?;
            let y = g.bias_add(y, p(&format!("enc{i}.bias")))?;
            x = g.relu(y)?;
            skips.push(x);
        }

        let k = self.spec.kernel;
        let ctx = match self.spec.context {
            ContextBlock::Conv => g.conv2d(x, p("ctx.weight"), 1, k / 2)?,
            ContextBlock::Sdc => {
                let off = g.conv2d(x, p("ctx.offset.weight"), 1, 0)?;
                let off = g.bias_add(off, p("ctx.offset.bias"))?;
                let dil = g.conv2d(x, p("ctx.dil.weight"), 1, 0)?;
                let dil = g.bias_add(dil, p("ctx.dil.bias"))?;
                g.sdc(x, p("ctx.weight"), off, dil)?
            }
        };
        let ctx = g.bias_add(ctx, p("ctx.bias"))?;
        x = g.relu(ctx)?;

        for i in (0..stages - 1).rev() {
            let up = g.upsample_nearest(x, 2)?;
            let y = g.conv2d(up, p(&format!("dec{i}.weight")), 1, 1)?;
            let y = g.bias_add(y, p(&format!("dec{i}.bias")))?;
            let y = g.relu(y)?;
            x = g.add(y, skips[i])?;
        }

        let y = g.conv2d(x, p("head.weight"), 1, 0)?;
        let y = g.bias_add(y, p("head.bias"))?;
        let y = g.softplus(y)?;
        g.scale(y, T::of(self.spec.output_scale))
    }

    /// Inference on a `[N, 3, H, W]` batch.
    pub fn forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let ids = self.bind(&mut g, false);
        let x = g.constant(image.clone());
        let y = self.forward_graph(&mut g, &ids, x)?;
        Ok(g.value(y).clone())
    }
}

impl Predictor for Model<f32> {
    fn predict(&self, rgb: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (h, w) = rgb.hw()?;
        let x = rgb.clone().reshape(&[1, rgb.dims()[0], h, w])?;
        self.forward(&x)?.reshape(&[1, h, w])
    }
}

/// Learning-rate schedule over the whole run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    /// Half-cosine from `lr` down to zero at the last step.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub schedule: Schedule,
    pub momentum: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    /// Optional cap on optimizer steps (0 = no cap).
    pub max_steps: usize,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-2,
            schedule: Schedule::Cosine,
            momentum: 0.9,
            epochs: 30,
            batch: 4,
            seed: 0,
            clip_norm: 5.0,
            max_steps: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Defaults for fine-tuning on a few target samples.
    pub fn finetune() -> Self {
        TrainConfig {
            lr: 1e-3,
            schedule: Schedule::Constant,
            epochs: 15,
            batch: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must be in [0, 1)"));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::invalid("clip_norm must be >= 0"));
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss of every epoch.
    pub epoch_losses: Vec<f64>,
    /// Loss of every optimizer step.
    pub step_losses: Vec<f64>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,mean_loss\n");
        for (i, l) in self.epoch_losses.iter().enumerate() {
            s.push_str(&format!("{},{:.9}\n", i + 1, l));
        }
        s
    }
}

/// Assembles `[B, 3, H, W]` and `[B, 1, H, W]` batches.
fn make_batch<T: Real>(samples: &[Sample], idx: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
    let rgb: Vec<Tensor<T>> = idx.iter().map(|&i| samples[i].rgb.cast()).collect();
    let hgt: Vec<Tensor<T>> = idx.iter().map(|&i| samples[i].height.cast()).collect();
    Ok((Tensor::stack(&rgb)?, Tensor::stack(&hgt)?))
}

/// SGD with momentum, one batch per [`Trainer::step`].
pub struct Trainer<T> {
    cfg: TrainConfig,
    velocity: Vec<Tensor<T>>,
    step: usize,
    total_steps: usize,
}

impl<T: Real> Trainer<T> {
    /// `total_steps` sizes the learning-rate schedule.
    pub fn new(model: &Model<T>, cfg: TrainConfig, total_steps: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            velocity: model
                .params
                .iter()
                .map(|(_, t)| Tensor::zeros(t.dims()))
                .collect(),
            cfg,
            step: 0,
            total_steps,
        })
    }

    /// Learning rate of the next step.
    pub fn lr(&self) -> f64 {
        match self.cfg.schedule {
            Schedule::Constant => self.cfg.lr,
            Schedule::Cosine => {
                let t = self.step as f64 / self.total_steps.max(1) as f64;
                0.5 * self.cfg.lr * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
            }
        }
    }

    /// Runs one batch and returns its loss before the update.
    pub fn step(&mut self, model: &mut Model<T>, image: &Tensor<T>, height: &Tensor<T>) -> Result<f64> {
        let mut g = Graph::new();
        let ids = model.bind(&mut g, true);
        let x = g.constant(image.clone());
        let pred = model.forward_graph(&mut g, &ids, x)?;
        let pair_seed = seed::derive_seed(self.cfg.seed, &format!("pairs/{}", self.step));
        let loss = g.loss_total(pred, height, &self.cfg.loss, pair_seed)?;
        let value = g.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(Error::Divergence(format!(
                "loss became {value} at step {}",
                self.step
            )));
        }
        let mut grads = g.backward(loss)?;
        let mut gs: Vec<Tensor<T>> = ids
            .iter()
            .map(|&id| grads.take(id).expect("parameters require grad"))
            .collect();
        if self.cfg.clip_norm > 0.0 {
            let norm = gs
                .iter()
                .flat_map(|t| t.data().iter())
                .map(|v| v.as_f64() * v.as_f64())
                .sum::<f64>()
                .sqrt();
            if norm > self.cfg.clip_norm {
                let k = T::of(self.cfg.clip_norm / norm);
                gs.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v = *v * k));
            }
        }
        let lr = T::of(self.lr());
        let mu = T::of(self.cfg.momentum);
        for ((v, gt), (_, p)) in self.velocity.iter_mut().zip(&gs).zip(model.params.iter_mut()) {
            for ((vv, &gv), pv) in v.data_mut().iter_mut().zip(gt.data()).zip(p.data_mut()) {
                *vv = mu * *vv + gv;
                *pv = *pv - lr * *vv;
            }
        }
        if model.params.iter().any(|(_, t)| !t.all_finite()) {
            return Err(Error::Divergence(format!(
                "parameters became non-finite at step {}",
                self.step
            )));
        }
        self.step += 1;
        Ok(value)
    }
}

/// Trains on in-memory samples with a seeded shuffle per epoch.
pub fn train_on<T: Real>(model: &mut Model<T>, samples: &[Sample], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("no training samples"));
    }
    let mut total = cfg.epochs * samples.len().div_ceil(cfg.batch);
    if cfg.max_steps > 0 {
        total = total.min(cfg.max_steps);
    }
    let mut trainer = Trainer::new(model, cfg.clone(), total)?;
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    'epochs: for epoch in 0..cfg.epochs {
        let mut rng = seed::rng(cfg.seed, &format!("shuffle/{epoch}"));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch) {
            if cfg.max_steps > 0 && report.step_losses.len() >= cfg.max_steps {
                if batches > 0 {
                    report.epoch_losses.push(total / batches as f64);
                }
                break 'epochs;
            }
            let (x, y) = make_batch::<T>(samples, chunk)?;
            let l = trainer.step(model, &x, &y)?;
            report.step_losses.push(l);
            total += l;
            batches += 1;
        }
        report.epoch_losses.push(total / batches as f64);
    }
    Ok(report)
}

/// Trains on the training split of `manifest`.
pub fn train<T: Real>(model: &mut Model<T>, manifest: &DatasetManifest, cfg: &TrainConfig) -> Result<TrainReport> {
    if manifest.train.is_empty() {
        return Err(Error::invalid(format!("dataset `{}` has no training pairs", manifest.name)));
    }
    let samples = manifest.load_split(Split::Train)?;
    train_on(model, &samples, cfg)
}
