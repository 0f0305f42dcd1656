//! Desk-scale experiment runner: pretraining on the synthetic source city,
//! in-domain and zero-shot evaluation, and few-shot transfer to target
//! presets. Results are keyed by `(target, variant, init, pct, seed)`.
//!
//! `pct` doubles as the setting tag: `0` is zero-shot, `100` is the
//! in-domain source test split, anything else is a few-shot fraction.
//!
//! ```text
//! results/<plan-hash>/
//!   plan.json
//!   data/{source,target}/<preset>/...
//!   ckpt/<variant>_s<seed>.hmck  + _loss.csv
//!   cells/<key>.csv
//!   table.csv  table.txt
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossVariant};
use crate::metrics::{evaluate_split, MetricsReport};
use crate::model::{train, Checkpoint, ContextBlock, Model, ModelSpec, TrainConfig, TrainReport};
use crate::seed::{self, derive_seed};
use crate::synthdata::{generate_dataset, subsample_fewshot, DatasetManifest, SceneSpec, Split, SplitCounts};

/// `pct` tag of zero-shot rows.
pub const ZERO_SHOT: f64 = 0.0;
/// `pct` tag of in-domain rows.
pub const IN_DOMAIN: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "conv_baseline")]
    ConvBaseline,
    #[serde(rename = "sdc")]
    Sdc,
    #[serde(rename = "sdc+msg")]
    SdcMsg,
    #[serde(rename = "sdc+si")]
    SdcSi,
    #[serde(rename = "sdc+rank")]
    SdcRank,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::ConvBaseline,
        Variant::Sdc,
        Variant::SdcMsg,
        Variant::SdcSi,
        Variant::SdcRank,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::ConvBaseline => "conv_baseline",
            Variant::Sdc => "sdc",
            Variant::SdcMsg => "sdc+msg",
            Variant::SdcSi => "sdc+si",
            Variant::SdcRank => "sdc+rank",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant `{s}`")))
    }

    pub fn context(self) -> ContextBlock {
        match self {
            Variant::ConvBaseline => ContextBlock::Conv,
            _ => ContextBlock::Sdc,
        }
    }

    pub fn loss_variant(self) -> LossVariant {
        match self {
            Variant::ConvBaseline | Variant::Sdc => LossVariant::MseOnly,
            Variant::SdcMsg => LossVariant::Msg,
            Variant::SdcSi => LossVariant::Si,
            Variant::SdcRank => LossVariant::Rank,
        }
    }

    pub fn model_spec(self, base: &ModelSpec) -> ModelSpec {
        ModelSpec {
            context: self.context(),
            ..base.clone()
        }
    }

    pub fn loss(self, base: &LossConfig) -> LossConfig {
        LossConfig {
            variant: self.loss_variant(),
            ..base.clone()
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Starting point of a few-shot run. `Random` stands in for generic
/// pretrained weights, which this artifact does not ship.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Pretrained,
    Random,
}

impl Init {
    pub fn name(self) -> &'static str {
        match self {
            Init::Pretrained => "pretrained",
            Init::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pretrained" => Ok(Init::Pretrained),
            "random" => Ok(Init::Random),
            other => Err(Error::invalid(format!("unknown init `{other}`"))),
        }
    }
}

impl fmt::Display for Init {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentPlan {
    /// Scene preset of the pretraining city.
    pub source: String,
    /// Scene presets evaluated zero-shot and fine-tuned few-shot.
    pub targets: Vec<String>,
    pub variants: Vec<Variant>,
    pub inits: Vec<Init>,
    pub pcts: Vec<f64>,
    pub seeds: Vec<u64>,
    pub root_seed: u64,
    pub height: usize,
    pub width: usize,
    pub source_counts: SplitCounts,
    pub target_counts: SplitCounts,
    pub model: ModelSpec,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan {
            source: "source".into(),
            targets: vec!["ahn".into()],
            variants: Variant::ALL.to_vec(),
            inits: vec![Init::Pretrained, Init::Random],
            pcts: vec![1.0, 5.0],
            seeds: vec![0, 1, 2],
            root_seed: 0,
            height: 32,
            width: 32,
            source_counts: SplitCounts {
                train: 256,
                val: 0,
                test: 64,
            },
            target_counts: SplitCounts {
                train: 64,
                val: 0,
                test: 64,
            },
            model: ModelSpec::default(),
            pretrain: TrainConfig::default(),
            finetune: TrainConfig::finetune(),
        }
    }
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        fn unique<T: Ord + Clone>(items: &[T], what: &str) -> Result<()> {
            let set: BTreeSet<T> = items.iter().cloned().collect();
            if set.len() != items.len() {
                return Err(Error::invalid(format!("duplicate entries in plan {what}")));
            }
            Ok(())
        }
        if self.variants.is_empty() || self.seeds.is_empty() {
            return Err(Error::invalid("plan needs at least one variant and one seed"));
        }
        unique(&self.variants, "variants")?;
        unique(&self.inits, "inits")?;
        unique(&self.seeds, "seeds")?;
        unique(&self.targets, "targets")?;
        let pct_bits: Vec<u64> = self.pcts.iter().map(|p| p.to_bits()).collect();
        unique(&pct_bits, "pcts")?;
        for &p in &self.pcts {
            if !(p > 0.0 && p < 100.0) {
                return Err(Error::invalid(format!("few-shot pct {p} outside (0, 100)")));
            }
        }
        if self.source_counts.train == 0 || self.source_counts.test == 0 {
            return Err(Error::invalid("source needs train and test images"));
        }
        if !self.targets.is_empty() && self.target_counts.test == 0 {
            return Err(Error::invalid("targets need test images"));
        }
        if !self.pcts.is_empty() && !self.inits.is_empty() && self.target_counts.train == 0 {
            return Err(Error::invalid("few-shot cells need target training images"));
        }
        for name in std::iter::once(&self.source).chain(&self.targets) {
            self.scene(name)?.validate()?;
        }
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()
    }

    /// Scene description of a preset at the plan's raster size.
    pub fn scene(&self, name: &str) -> Result<SceneSpec> {
        Ok(SceneSpec {
            height: self.height,
            width: self.width,
            ..SceneSpec::preset(name)?
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serialises")
    }

    /// 16 hex digits identifying the plan contents.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("plan serialises");
        format!("{:016x}", seed::fingerprint(&canonical))
    }

    /// Every key the plan produces, in run order.
    pub fn cells(&self) -> Vec<CellKey> {
        let mut out = Vec::new();
        for &variant in &self.variants {
            for &seed in &self.seeds {
                out.push(CellKey::new(&self.source, variant, Init::Pretrained, IN_DOMAIN, seed));
                for t in &self.targets {
                    out.push(CellKey::new(t, variant, Init::Pretrained, ZERO_SHOT, seed));
                    for &init in &self.inits {
                        for &pct in &self.pcts {
                            out.push(CellKey::new(t, variant, init, pct, seed));
                        }
                    }
                }
            }
        }
        out
    }

    /// Weight-initialisation seed of run `seed`.
    pub fn init_seed(&self, seed: u64) -> u64 {
        derive_seed(self.root_seed, &format!("init/{seed}"))
    }

    /// Shuffle and pair-sampling seed of the pretraining run `seed`.
    pub fn pretrain_seed(&self, seed: u64) -> u64 {
        derive_seed(self.root_seed, &format!("pretrain/{seed}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub target: String,
    pub variant: Variant,
    pub init: Init,
    pub pct: f64,
    pub seed: u64,
}

impl CellKey {
    pub fn new(target: &str, variant: Variant, init: Init, pct: f64, seed: u64) -> Self {
        CellKey {
            target: target.to_string(),
            variant,
            init,
            pct,
            seed,
        }
    }

    /// File-name-safe identifier, unique per key.
    pub fn id(&self) -> String {
        format!(
            "{}__{}__{}__p{}__s{}",
            self.target, self.variant, self.init, self.pct, self.seed
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub key: CellKey,
    pub report: MetricsReport,
}

pub const CSV_HEADER: [&str; 10] = [
    "dataset", "variant", "init", "pct", "seed", "mae", "rmse", "si_rmse", "msge", "n_images",
];

/// Mean and sample standard deviation over seeds of one
/// `(target, variant, init, pct)` group.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub target: String,
    pub variant: Variant,
    pub init: Init,
    pub pct: f64,
    pub n_seeds: usize,
    pub mean: [f64; 4],
    /// Present only with at least two seeds.
    pub std: Option<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultTable {
    rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rows(&self) -> &[ResultRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn insert(&mut self, key: CellKey, report: MetricsReport) -> Result<()> {
        if self.get(&key).is_some() {
            return Err(Error::invalid(format!("cell `{}` recorded twice", key.id())));
        }
        self.rows.push(ResultRow { key, report });
        Ok(())
    }

    pub fn get(&self, key: &CellKey) -> Option<&MetricsReport> {
        let id = key.id();
        self.rows.iter().find(|r| r.key.id() == id).map(|r| &r.report)
    }

    /// Mean MAE over seeds of one group, if any row matches.
    pub fn mean_mae(&self, target: &str, variant: Variant, init: Init, pct: f64) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| {
                r.key.target == target
                    && r.key.variant == variant
                    && r.key.init == init
                    && r.key.pct == pct
            })
            .map(|r| r.report.mae)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn aggregate(&self) -> Vec<Aggregate> {
        let mut groups: Vec<(String, Variant, Init, f64, Vec<[f64; 4]>)> = Vec::new();
        for r in &self.rows {
            let k = &r.key;
            match groups.iter_mut().find(|g| {
                g.0 == k.target && g.1 == k.variant && g.2 == k.init && g.3 == k.pct
            }) {
                Some(g) => g.4.push(r.report.values()),
                None => groups.push((k.target.clone(), k.variant, k.init, k.pct, vec![r.report.values()])),
            }
        }
        groups
            .into_iter()
            .map(|(target, variant, init, pct, vals)| {
                let n = vals.len() as f64;
                let mut mean = [0.0; 4];
                for v in &vals {
                    for m in 0..4 {
                        mean[m] += v[m] / n;
                    }
                }
                let std = (vals.len() >= 2).then(|| {
                    let mut s = [0.0; 4];
                    for v in &vals {
                        for m in 0..4 {
                            s[m] += (v[m] - mean[m]).powi(2) / (n - 1.0);
                        }
                    }
                    s.map(f64::sqrt)
                });
                Aggregate {
                    target,
                    variant,
                    init,
                    pct,
                    n_seeds: vals.len(),
                    mean,
                    std,
                }
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER).expect("in-memory write");
        for r in &self.rows {
            let k = &r.key;
            let m = &r.report;
            w.write_record([
                k.target.clone(),
                k.variant.to_string(),
                k.init.to_string(),
                k.pct.to_string(),
                k.seed.to_string(),
                m.mae.to_string(),
                m.rmse.to_string(),
                m.si_rmse.to_string(),
                m.msge.to_string(),
                m.n_images.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("UTF-8 fields")
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(|e| Error::invalid(format!("results CSV: {e}")))?;
        if header.iter().ne(CSV_HEADER) {
            return Err(Error::invalid(format!("unexpected results header `{}`", header.iter().collect::<Vec<_>>().join(","))));
        }
        let mut table = ResultTable::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::invalid(format!("results CSV: {e}")))?;
            let num = |i: usize| -> Result<f64> {
                rec[i]
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad number `{}` in column {}", &rec[i], CSV_HEADER[i])))
            };
            let int = |i: usize| -> Result<u64> {
                rec[i]
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad integer `{}` in column {}", &rec[i], CSV_HEADER[i])))
            };
            let key = CellKey::new(&rec[0], Variant::parse(&rec[1])?, Init::parse(&rec[2])?, num(3)?, int(4)?);
            let report = MetricsReport {
                mae: num(5)?,
                rmse: num(6)?,
                si_rmse: num(7)?,
                msge: num(8)?,
                n_images: int(9)? as usize,
            };
            table.insert(key, report)?;
        }
        Ok(table)
    }

    /// Aligned text table: one row per `(dataset, variant, init)`, four
    /// metric columns per setting, `mean±std` over seeds. The lowest mean of
    /// every column within a dataset carries a `*`.
    pub fn to_text(&self) -> String {
        const METRICS: [&str; 4] = ["MAE", "RMSE", "SI-RMSE", "MSGE"];
        let aggs = self.aggregate();
        let mut pcts: Vec<f64> = aggs.iter().map(|a| a.pct).collect();
        pcts.sort_by(f64::total_cmp);
        pcts.dedup();
        let setting = |p: f64| -> String {
            if p == ZERO_SHOT {
                "zero-shot".into()
            } else if p == IN_DOMAIN {
                "in-domain".into()
            } else {
                format!("{p}%")
            }
        };

        // Row labels in first-seen order.
        let mut labels: Vec<(String, Variant, Init)> = Vec::new();
        for a in &aggs {
            let l = (a.target.clone(), a.variant, a.init);
            if !labels.contains(&l) {
                labels.push(l);
            }
        }
        let mut best: BTreeMap<(String, usize, usize), f64> = BTreeMap::new();
        for a in &aggs {
            let pi = pcts.iter().position(|&p| p == a.pct).expect("collected");
            for m in 0..4 {
                let e = best.entry((a.target.clone(), pi, m)).or_insert(f64::INFINITY);
                *e = e.min(a.mean[m]);
            }
        }

        let mut header = vec!["dataset".to_string(), "variant".into(), "init".into()];
        for &p in &pcts {
            for m in METRICS {
                header.push(format!("{m} {}", setting(p)));
            }
        }
        let mut lines = vec![header];
        for (target, variant, init) in &labels {
            let mut line = vec![target.clone(), variant.to_string(), init.to_string()];
            for (pi, &p) in pcts.iter().enumerate() {
                let a = aggs.iter().find(|a| {
                    &a.target == target && a.variant == *variant && a.init == *init && a.pct == p
                });
                for m in 0..4 {
                    line.push(match a {
                        None => "-".into(),
                        Some(a) => {
                            let mut s = match a.std {
                                Some(sd) => format!("{:.3}±{:.3}", a.mean[m], sd[m]),
                                None => format!("{:.3}", a.mean[m]),
                            };
                            if best[&(target.clone(), pi, m)] == a.mean[m] {
                                s.push('*');
                            }
                            s
                        }
                    });
                }
            }
            lines.push(line);
        }

        let cols = lines[0].len();
        let widths: Vec<usize> = (0..cols)
            .map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for l in &lines {
            let cells: Vec<String> = l
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (s, &w))| {
                    let pad = w - s.chars().count();
                    if c < 3 {
                        format!("{s}{}", " ".repeat(pad))
                    } else {
                        format!("{}{s}", " ".repeat(pad))
                    }
                })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out.push_str("* best mean in column per dataset; random init replaces generic pretrained weights\n");
        out
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `table.csv` and `table.txt` under `dir`. Fails if `plan` expects
/// a cell the table lacks.
pub fn emit_tables(table: &ResultTable, plan: &ExperimentPlan, dir: &Path) -> Result<()> {
    let missing: Vec<String> = plan
        .cells()
        .iter()
        .filter(|k| table.get(k).is_none())
        .map(CellKey::id)
        .collect();
    if !missing.is_empty() {
        return Err(Error::invalid(format!(
            "incomplete plan: {} missing cells, first `{}`",
            missing.len(),
            missing[0]
        )));
    }
    write_file(&dir.join("table.csv"), table.to_csv())?;
    write_file(&dir.join("table.txt"), table.to_text())
}

/// Pretrains one variant on the source training split and persists the
/// checkpoint with its loss curve under `ckpt_dir`. Fails if the final
/// epoch loss is not below the first.
pub fn run_pretrain(
    plan: &ExperimentPlan,
    variant: Variant,
    seed: u64,
    source: &DatasetManifest,
    ckpt_dir: Option<&Path>,
) -> Result<(Checkpoint<f32>, TrainReport)> {
    let spec = variant.model_spec(&plan.model);
    let mut model = Model::<f32>::random(spec, plan.init_seed(seed))?;
    let cfg = TrainConfig {
        seed: plan.pretrain_seed(seed),
        loss: variant.loss(&plan.pretrain.loss),
        ..plan.pretrain.clone()
    };
    let report = train(&mut model, source, &cfg)?;
    if let (Some(first), Some(last)) = (report.epoch_losses.first(), report.epoch_losses.last()) {
        if report.epoch_losses.len() > 1 && !(last < first) {
            return Err(Error::Divergence(format!(
                "pretraining {variant} seed {seed} did not reduce the loss ({first} -> {last})"
            )));
        }
    }
    let ckpt = model.to_checkpoint(cfg.seed);
    if let Some(dir) = ckpt_dir {
        let stem = format!("{variant}_s{seed}");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        ckpt.save(&dir.join(format!("{stem}.hmck")))?;
        write_file(&dir.join(format!("{stem}_loss.csv")), report.to_csv())?;
    }
    Ok((ckpt, report))
}

/// Evaluates a checkpoint on each target's test split without training.
pub fn run_zeroshot(ckpt: &Checkpoint<f32>, targets: &[DatasetManifest]) -> Result<Vec<MetricsReport>> {
    let model = Model::from_checkpoint(ckpt.spec.clone(), ckpt)?;
    targets
        .iter()
        .map(|t| evaluate_split(&model, t, Split::Test))
        .collect()
}

/// Fine-tunes on `pct`% of the target training split, then evaluates on
/// the full target test split.
pub fn run_fewshot(
    plan: &ExperimentPlan,
    ckpt: &Checkpoint<f32>,
    variant: Variant,
    target: &DatasetManifest,
    pct: f64,
    init: Init,
    seed: u64,
) -> Result<MetricsReport> {
    let (model, _) = fewshot_train(plan, ckpt, variant, target, pct, init, seed)?;
    evaluate_split(&model, target, Split::Test)
}

/// The training half of [`run_fewshot`]: returns the fine-tuned model and
/// its loss curve.
pub fn fewshot_train(
    plan: &ExperimentPlan,
    ckpt: &Checkpoint<f32>,
    variant: Variant,
    target: &DatasetManifest,
    pct: f64,
    init: Init,
    seed: u64,
) -> Result<(Model<f32>, TrainReport)> {
    let subset = subsample_fewshot(
        target,
        pct,
        derive_seed(plan.root_seed, &format!("fewshot/{}/{seed}", target.name)),
    )?;
    let spec = variant.model_spec(&plan.model);
    let mut model = match init {
        Init::Pretrained => Model::from_checkpoint(spec, ckpt)?,
        Init::Random => Model::random(spec, plan.init_seed(seed))?,
    };
    let cfg = TrainConfig {
        seed: derive_seed(plan.root_seed, &format!("finetune/{}/{pct}/{seed}", target.name)),
        loss: variant.loss(&plan.finetune.loss),
        ..plan.finetune.clone()
    };
    let report = train(&mut model, &subset, &cfg)?;
    Ok((model, report))
}

/// Generates (or reuses, when the manifest already matches) a preset
/// dataset under `dir`.
pub fn prepare_dataset(plan: &ExperimentPlan, name: &str, counts: SplitCounts, dir: &Path) -> Result<DatasetManifest> {
    let spec = plan.scene(name)?;
    let data_seed = derive_seed(plan.root_seed, &format!("data/{name}"));
    if let Ok(m) = DatasetManifest::load(dir) {
        if m.scene == spec && m.counts == counts && m.seed == data_seed && m.name == name {
            return Ok(m);
        }
    }
    generate_dataset(name, &spec, counts, data_seed, dir)
}

/// Output of [`run_plan`].
#[derive(Debug)]
pub struct PlanRun {
    pub dir: PathBuf,
    pub table: ResultTable,
    pub pretrain: Vec<(Variant, u64, TrainReport)>,
}

/// Runs every cell of `plan` under `results_root/<plan-hash>/` and emits
/// the tables. `progress` receives one line per finished step.
pub fn run_plan(plan: &ExperimentPlan, results_root: &Path, progress: &mut dyn FnMut(&str)) -> Result<PlanRun> {
    plan.validate()?;
    let dir = results_root.join(plan.hash());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_file(&dir.join("plan.json"), plan.to_json())?;

    let source = prepare_dataset(plan, &plan.source, plan.source_counts, &dir.join("data/source").join(&plan.source))?;
    let targets = plan
        .targets
        .iter()
        .map(|t| prepare_dataset(plan, t, plan.target_counts, &dir.join("data/target").join(t)))
        .collect::<Result<Vec<_>>>()?;
    progress(&format!("datasets ready under {}", dir.join("data").display()));

    let mut table = ResultTable::new();
    let mut pretrain = Vec::new();
    let cells_dir = dir.join("cells");
    let record = |table: &mut ResultTable, key: CellKey, report: MetricsReport| -> Result<()> {
        let mut one = ResultTable::new();
        one.insert(key.clone(), report)?;
        write_file(&cells_dir.join(format!("{}.csv", key.id())), one.to_csv())?;
        table.insert(key, report)
    };

    for &variant in &plan.variants {
        for &seed in &plan.seeds {
            let (ckpt, report) = run_pretrain(plan, variant, seed, &source, Some(&dir.join("ckpt")))?;
            progress(&format!(
                "pretrain {variant} seed {seed}: loss {:.4} -> {:.4}",
                report.epoch_losses.first().copied().unwrap_or(f64::NAN),
                report.epoch_losses.last().copied().unwrap_or(f64::NAN)
            ));
            pretrain.push((variant, seed, report));

            let model = Model::from_checkpoint(ckpt.spec.clone(), &ckpt)?;
            let m = evaluate_split(&model, &source, Split::Test)?;
            record(&mut table, CellKey::new(&plan.source, variant, Init::Pretrained, IN_DOMAIN, seed), m)?;

            let zs = run_zeroshot(&ckpt, &targets)?;
            for (t, m) in targets.iter().zip(zs) {
                record(&mut table, CellKey::new(&t.name, variant, Init::Pretrained, ZERO_SHOT, seed), m)?;
            }
            for t in &targets {
                for &init in &plan.inits {
                    for &pct in &plan.pcts {
                        let m = run_fewshot(plan, &ckpt, variant, t, pct, init, seed)?;
                        progress(&format!("few-shot {} {variant} {init} {pct}% seed {seed}: MAE {:.4}", t.name, m.mae));
                        record(&mut table, CellKey::new(&t.name, variant, init, pct, seed), m)?;
                    }
                }
            }
        }
    }
    emit_tables(&table, plan, &dir)?;
    Ok(PlanRun { dir, table, pretrain })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(v: f64) -> MetricsReport {
        MetricsReport {
            mae: v,
            rmse: v * 1.5,
            si_rmse: v / 3.0,
            msge: 0.1 + v,
            n_images: 4,
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.name()));
        }
        assert!(Variant::parse("sdc+foo").is_err());
    }

    #[test]
    fn plan_cells_are_unique() {
        let plan = ExperimentPlan::default();
        let cells = plan.cells();
        let ids: BTreeSet<String> = cells.iter().map(CellKey::id).collect();
        assert_eq!(ids.len(), cells.len());
        // per (variant, seed): in-domain + zero-shot + 2 inits x 2 pcts
        assert_eq!(cells.len(), 5 * 3 * 6);
    }

    #[test]
    fn csv_round_trip() {
        let mut t = ResultTable::new();
        t.insert(CellKey::new("ahn", Variant::SdcMsg, Init::Random, 5.0, 2), report(0.1 + 0.2))
            .unwrap();
        t.insert(CellKey::new("ahn", Variant::Sdc, Init::Pretrained, 1.0, 0), report(1.0 / 3.0))
            .unwrap();
        let back = ResultTable::from_csv(&t.to_csv()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn duplicate_cell_rejected() {
        let mut t = ResultTable::new();
        let k = CellKey::new("ahn", Variant::Sdc, Init::Random, 1.0, 0);
        t.insert(k.clone(), report(1.0)).unwrap();
        assert!(t.insert(k, report(2.0)).is_err());
    }

    #[test]
    fn text_table_schema() {
        let mut t = ResultTable::new();
        for seed in 0..2 {
            for pct in [1.0, 5.0] {
                t.insert(CellKey::new("ahn", Variant::Sdc, Init::Pretrained, pct, seed), report(pct + seed as f64))
                    .unwrap();
                t.insert(CellKey::new("ahn", Variant::ConvBaseline, Init::Pretrained, pct, seed), report(pct + 3.0))
                    .unwrap();
            }
        }
        let text = t.to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("dataset"));
        assert_eq!(lines[0].matches("MAE").count(), 2);
        assert_eq!(lines.len(), 4);
        assert!(lines[1].contains('*'));
        assert!(lines[1].contains('±'));
        assert!(!lines[2].contains('*'));
        let agg = t.aggregate();
        assert_eq!(agg.len(), 4);
        assert!(agg.iter().all(|a| a.std.is_some()));
    }

    #[test]
    fn emit_requires_complete_plan() {
        let plan = ExperimentPlan {
            variants: vec![Variant::Sdc],
            seeds: vec![0],
            targets: vec![],
            ..ExperimentPlan::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let mut t = ResultTable::new();
        assert!(emit_tables(&t, &plan, dir.path()).is_err());
        t.insert(CellKey::new("source", Variant::Sdc, Init::Pretrained, IN_DOMAIN, 0), report(1.0))
            .unwrap();
        emit_tables(&t, &plan, dir.path()).unwrap();
        let csv = fs::read_to_string(dir.path().join("table.csv")).unwrap();
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn plan_validation() {
        assert!(ExperimentPlan::default().validate().is_ok());
        let bad = ExperimentPlan {
            pcts: vec![1.0, 1.0],
            ..ExperimentPlan::default()
        };
        assert!(bad.validate().is_err());
        let bad = ExperimentPlan {
            targets: vec!["nowhere".into()],
            ..ExperimentPlan::default()
        };
        assert!(bad.validate().is_err());
    }
}
