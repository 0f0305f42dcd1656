use std::fs;
use std::path::{Path, PathBuf};

use mhe_core::gradcheck::{self, GradcheckConfig};
use mhe_core::metrics::{evaluate_split, ConstantPredictor, GroundTruthStub, MetricsReport, Predictor};
use mhe_core::model::{train, Checkpoint, Model, ModelSpec, TrainConfig, TrainReport};
use mhe_core::protocol::{fewshot_train, run_plan, ExperimentPlan, Init, Variant};
use mhe_core::synthdata::{generate_dataset, DatasetManifest, SceneSpec, Split, SplitCounts};
use serde::{Deserialize, Serialize};

use crate::config::{echo, Layers};
use crate::error::CliError;

pub const CHECKPOINT_FILE: &str = "model.hmck";
pub const LOSS_FILE: &str = "loss.csv";
pub const METRICS_FILE: &str = "metrics.json";

fn require<'a>(v: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    v.as_deref()
        .ok_or_else(|| CliError::config(format!("`{key}` is required")))
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write(path, serde_json::to_string_pretty(value).expect("serialisable") + "\n")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub out: PathBuf,
    pub name: String,
    /// Scene preset supplying the defaults of `[scene]`.
    pub preset: String,
    pub seed: u64,
    pub counts: SplitCounts,
    pub scene: SceneSpec,
}

impl GenConfig {
    pub fn for_preset(preset: &str) -> Result<Self, CliError> {
        Ok(GenConfig {
            out: PathBuf::from("data").join(preset),
            name: preset.to_string(),
            preset: preset.to_string(),
            seed: 0,
            counts: SplitCounts { train: 64, val: 0, test: 64 },
            scene: SceneSpec::preset(preset)?,
        })
    }
}

pub fn gen(layers: &Layers) -> Result<String, CliError> {
    let preset = layers.string("preset")?.unwrap_or_else(|| "source".into());
    let cfg = layers.resolve(&GenConfig::for_preset(&preset)?)?;
    cfg.scene.validate()?;
    echo(&cfg, &cfg.out)?;
    let m = generate_dataset(&cfg.name, &cfg.scene, cfg.counts, cfg.seed, &cfg.out)?;
    Ok(format!(
        "generated `{}` under {}: train {} val {} test {}",
        m.name,
        cfg.out.display(),
        m.train.len(),
        m.val.len(),
        m.test.len()
    ))
}

/// `train.seed` is replaced by a seed derived from `root_seed` and `seed`,
/// exactly as a benchmark plan pretrains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCmd {
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    /// Decides the context block and the loss.
    pub variant: Variant,
    pub root_seed: u64,
    pub seed: u64,
    /// Start from this checkpoint instead of a random initialisation.
    pub init_from: Option<PathBuf>,
    pub model: ModelSpec,
    pub train: TrainConfig,
}

impl Default for TrainCmd {
    fn default() -> Self {
        TrainCmd {
            data: None,
            out: "runs/train".into(),
            variant: Variant::Sdc,
            root_seed: 0,
            seed: 0,
            init_from: None,
            model: ModelSpec::default(),
            train: TrainConfig::default(),
        }
    }
}

fn save_run(out: &Path, model: &Model<f32>, seed: u64, report: &TrainReport) -> Result<(), CliError> {
    model.to_checkpoint(seed).save(&out.join(CHECKPOINT_FILE))?;
    write(&out.join(LOSS_FILE), report.to_csv())
}

fn loss_summary(report: &TrainReport) -> String {
    match (report.epoch_losses.first(), report.epoch_losses.last()) {
        (Some(a), Some(b)) => format!("loss {a:.4} -> {b:.4} over {} epochs", report.epoch_losses.len()),
        _ => "no training steps".into(),
    }
}

pub fn train_cmd(layers: &Layers) -> Result<String, CliError> {
    let cfg = layers.resolve(&TrainCmd::default())?;
    let data = require(&cfg.data, "data")?;
    cfg.train.validate()?;
    echo(&cfg, &cfg.out)?;
    let manifest = DatasetManifest::load(data)?;
    let plan = ExperimentPlan {
        root_seed: cfg.root_seed,
        model: cfg.model.clone(),
        pretrain: cfg.train.clone(),
        ..ExperimentPlan::default()
    };
    let spec = cfg.variant.model_spec(&plan.model);
    let mut model = match &cfg.init_from {
        Some(path) => Model::from_checkpoint(spec, &Checkpoint::load(path)?)?,
        None => Model::random(spec, plan.init_seed(cfg.seed))?,
    };
    let tc = TrainConfig {
        seed: plan.pretrain_seed(cfg.seed),
        loss: cfg.variant.loss(&cfg.train.loss),
        ..cfg.train.clone()
    };
    let report = train(&mut model, &manifest, &tc)?;
    save_run(&cfg.out, &model, tc.seed, &report)?;
    Ok(format!(
        "trained {} on `{}`: {}; checkpoint {}",
        cfg.variant,
        manifest.name,
        loss_summary(&report),
        cfg.out.join(CHECKPOINT_FILE).display()
    ))
}

/// The architecture always comes from `checkpoint`; with `init = "random"`
/// only its shape is used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneCmd {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
    pub variant: Variant,
    pub init: Init,
    pub pct: f64,
    pub root_seed: u64,
    pub seed: u64,
    pub finetune: TrainConfig,
}

impl Default for FinetuneCmd {
    fn default() -> Self {
        FinetuneCmd {
            data: None,
            checkpoint: None,
            out: "runs/finetune".into(),
            variant: Variant::Sdc,
            init: Init::Pretrained,
            pct: 1.0,
            root_seed: 0,
            seed: 0,
            finetune: TrainConfig::finetune(),
        }
    }
}

pub fn finetune(layers: &Layers) -> Result<String, CliError> {
    let cfg = layers.resolve(&FinetuneCmd::default())?;
    let data = require(&cfg.data, "data")?;
    let ckpt_path = require(&cfg.checkpoint, "checkpoint")?;
    cfg.finetune.validate()?;
    echo(&cfg, &cfg.out)?;
    let target = DatasetManifest::load(data)?;
    let ckpt = Checkpoint::<f32>::load(ckpt_path)?;
    let plan = ExperimentPlan {
        root_seed: cfg.root_seed,
        model: ckpt.spec.clone(),
        finetune: cfg.finetune.clone(),
        ..ExperimentPlan::default()
    };
    let (model, report) = fewshot_train(&plan, &ckpt, cfg.variant, &target, cfg.pct, cfg.init, cfg.seed)?;
    save_run(&cfg.out, &model, cfg.seed, &report)?;
    let metrics = evaluate_split(&model, &target, Split::Test)?;
    write_json(&cfg.out.join(METRICS_FILE), &metrics)?;
    Ok(format!(
        "fine-tuned {} ({} init) on {}% of `{}`: {}\n{metrics}",
        cfg.variant,
        cfg.init,
        cfg.pct,
        target.name,
        loss_summary(&report)
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    Checkpoint,
    /// Predicts `constant` everywhere.
    Constant,
    /// Looks up the stored height raster; a sanity check of the metric path.
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalCmd {
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub split: Split,
    pub predictor: PredictorKind,
    pub checkpoint: Option<PathBuf>,
    pub constant: f32,
}

impl Default for EvalCmd {
    fn default() -> Self {
        EvalCmd {
            data: None,
            out: "runs/eval".into(),
            split: Split::Test,
            predictor: PredictorKind::Checkpoint,
            checkpoint: None,
            constant: 0.0,
        }
    }
}

pub fn eval(layers: &Layers) -> Result<String, CliError> {
    let cfg = layers.resolve(&EvalCmd::default())?;
    let data = require(&cfg.data, "data")?;
    echo(&cfg, &cfg.out)?;
    let manifest = DatasetManifest::load(data)?;
    let predictor: Box<dyn Predictor> = match cfg.predictor {
        PredictorKind::Checkpoint => {
            let ckpt = Checkpoint::<f32>::load(require(&cfg.checkpoint, "checkpoint")?)?;
            Box::new(Model::from_checkpoint(ckpt.spec.clone(), &ckpt)?)
        }
        PredictorKind::Constant => Box::new(ConstantPredictor(cfg.constant)),
        PredictorKind::GroundTruth => Box::new(GroundTruthStub::from_manifest(&manifest)?),
    };
    let metrics: MetricsReport = evaluate_split(predictor.as_ref(), &manifest, cfg.split)?;
    write_json(&cfg.out.join(METRICS_FILE), &metrics)?;
    Ok(format!("{} split of `{}`\n{metrics}", cfg.split.name(), manifest.name))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckCmd {
    pub out: PathBuf,
    pub gradcheck: GradcheckConfig,
}

impl Default for GradcheckCmd {
    fn default() -> Self {
        GradcheckCmd {
            out: "runs/gradcheck".into(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

/// Runs every suite; a failing family is a `check` error after the report
/// has been written and printed.
pub fn gradcheck(layers: &Layers) -> Result<String, CliError> {
    let cfg = layers.resolve(&GradcheckCmd::default())?;
    cfg.gradcheck.validate()?;
    echo(&cfg, &cfg.out)?;
    let report = gradcheck::run_all(&cfg.gradcheck)?;
    write(&cfg.out.join("report.txt"), format!("{report}\n"))?;
    write_json(&cfg.out.join("report.json"), &report)?;
    println!("{report}");
    let failed: Vec<String> = report
        .families
        .iter()
        .filter(|f| !f.passed())
        .map(|f| format!("{}.{} ({:.3e})", f.suite, f.family, f.max_rel_err))
        .collect();
    if failed.is_empty() {
        Ok(format!("all {} families within tolerance", report.families.len()))
    } else {
        Err(CliError::check(format!(
            "gradient check failed for {} of {} families: {}",
            failed.len(),
            report.families.len(),
            failed.join(", ")
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchCmd {
    /// Results root; the run lands in `<out>/<plan-hash>/`.
    pub out: PathBuf,
    pub plan: ExperimentPlan,
}

impl Default for BenchCmd {
    fn default() -> Self {
        BenchCmd {
            out: "results".into(),
            plan: ExperimentPlan::default(),
        }
    }
}

pub fn bench(layers: &Layers) -> Result<String, CliError> {
    let cfg = layers.resolve(&BenchCmd::default())?;
    cfg.plan.validate()?;
    echo(&cfg, &cfg.out.join(cfg.plan.hash()))?;
    let run = run_plan(&cfg.plan, &cfg.out, &mut |line| eprintln!("{line}"))?;
    Ok(format!("{}\nresults in {}", run.table.to_text().trim_end(), run.dir.display()))
}
