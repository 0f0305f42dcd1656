use std::fs;

use mhe_core::metrics::evaluate_split;
use mhe_core::model::{Model, ModelSpec, TrainConfig};
use mhe_core::protocol::{
    fewshot_train, prepare_dataset, run_fewshot, run_plan, run_pretrain, run_zeroshot, CellKey, ExperimentPlan,
    Init, ResultTable, Variant, IN_DOMAIN, ZERO_SHOT,
};
use mhe_core::synthdata::{Split, SplitCounts};

fn tiny() -> ExperimentPlan {
    let counts = SplitCounts { train: 8, val: 0, test: 4 };
    ExperimentPlan {
        targets: vec!["ahn".into()],
        variants: vec![Variant::ConvBaseline, Variant::Sdc],
        inits: vec![Init::Pretrained, Init::Random],
        pcts: vec![25.0],
        seeds: vec![0, 1],
        height: 16,
        width: 16,
        source_counts: counts,
        target_counts: counts,
        model: ModelSpec { channels: vec![4, 8], ..ModelSpec::default() },
        pretrain: TrainConfig { epochs: 2, ..TrainConfig::default() },
        finetune: TrainConfig { epochs: 1, ..TrainConfig::finetune() },
        ..ExperimentPlan::default()
    }
}

fn tensor_bits(ck: &mhe_core::model::Checkpoint<f32>) -> Vec<u32> {
    ck.tensors.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn pretrain_seeds_and_zero_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let plan = tiny();
    let src = prepare_dataset(&plan, "source", plan.source_counts, dir.path()).unwrap();

    let frozen = ExperimentPlan { pretrain: TrainConfig { epochs: 0, ..plan.pretrain.clone() }, ..plan.clone() };
    let (ck, report) = run_pretrain(&frozen, Variant::Sdc, 0, &src, None).unwrap();
    assert!(report.epoch_losses.is_empty());
    let init = Model::<f32>::random(Variant::Sdc.model_spec(&plan.model), plan.init_seed(0)).unwrap();
    assert_eq!(ck.tensors, init.params());

    let (a, _) = run_pretrain(&plan, Variant::Sdc, 0, &src, Some(&dir.path().join("ck"))).unwrap();
    let (b, _) = run_pretrain(&plan, Variant::Sdc, 1, &src, None).unwrap();
    assert_ne!(tensor_bits(&a), tensor_bits(&b));
    assert!(dir.path().join("ck/sdc_s0.hmck").exists());
    assert!(dir.path().join("ck/sdc_s0_loss.csv").exists());
}

#[test]
fn zero_shot_on_source_equals_in_domain() {
    let dir = tempfile::tempdir().unwrap();
    let plan = tiny();
    let src = prepare_dataset(&plan, "source", plan.source_counts, dir.path()).unwrap();
    let (ck, _) = run_pretrain(&plan, Variant::ConvBaseline, 0, &src, None).unwrap();
    let model = Model::from_checkpoint(ck.spec.clone(), &ck).unwrap();
    let direct = evaluate_split(&model, &src, Split::Test).unwrap();
    let zs = run_zeroshot(&ck, std::slice::from_ref(&src)).unwrap();
    assert_eq!(zs, vec![direct]);
    assert!(run_zeroshot(&ck, &[]).unwrap().is_empty());
}

#[test]
fn fewshot_is_deterministic_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let plan = tiny();
    let src = prepare_dataset(&plan, "source", plan.source_counts, &dir.path().join("s")).unwrap();
    let tgt = prepare_dataset(&plan, "ahn", plan.target_counts, &dir.path().join("t")).unwrap();
    let (ck, _) = run_pretrain(&plan, Variant::Sdc, 0, &src, None).unwrap();
    let a = run_fewshot(&plan, &ck, Variant::Sdc, &tgt, 25.0, Init::Pretrained, 0).unwrap();
    let b = run_fewshot(&plan, &ck, Variant::Sdc, &tgt, 25.0, Init::Pretrained, 0).unwrap();
    assert_eq!(a.values().map(f64::to_bits), b.values().map(f64::to_bits));
    assert_eq!(a.n_images, 4);

    // 25% of 8 training images, one epoch at batch 1.
    let (_, rep) = fewshot_train(&plan, &ck, Variant::Sdc, &tgt, 25.0, Init::Random, 0).unwrap();
    assert_eq!(rep.step_losses.len(), 2);
    let c = run_fewshot(&plan, &ck, Variant::Sdc, &tgt, 25.0, Init::Random, 0).unwrap();
    assert_ne!(a.values(), c.values());
}

#[test]
fn plan_replay_and_layout() {
    let dir = tempfile::tempdir().unwrap();
    let plan = tiny();
    let run = run_plan(&plan, &dir.path().join("a"), &mut |_| {}).unwrap();
    assert_eq!(run.dir, dir.path().join("a").join(plan.hash()));
    assert_eq!(run.table.len(), plan.cells().len());
    assert_eq!(run.table.len(), 2 * 2 * (2 + 2));
    for key in plan.cells() {
        assert!(run.dir.join("cells").join(format!("{}.csv", key.id())).exists());
    }
    let csv = fs::read_to_string(run.dir.join("table.csv")).unwrap();
    assert_eq!(ResultTable::from_csv(&csv).unwrap(), run.table);
    assert!(fs::read_to_string(run.dir.join("table.txt")).unwrap().contains("zero-shot"));

    let again = run_plan(&plan, &dir.path().join("b"), &mut |_| {}).unwrap();
    assert_eq!(fs::read(again.dir.join("table.csv")).unwrap(), csv.as_bytes());

    let key = CellKey::new("source", Variant::Sdc, Init::Pretrained, IN_DOMAIN, 1);
    assert!(run.table.get(&key).is_some());
    assert!(run.table.get(&CellKey::new("ahn", Variant::Sdc, Init::Pretrained, ZERO_SHOT, 1)).is_some());
}

#[test]
fn plan_without_targets_only_has_in_domain_rows() {
    let dir = tempfile::tempdir().unwrap();
    let plan = ExperimentPlan { targets: vec![], seeds: vec![0], variants: vec![Variant::ConvBaseline], ..tiny() };
    let run = run_plan(&plan, dir.path(), &mut |_| {}).unwrap();
    assert_eq!(run.table.len(), 1);
    assert_eq!(run.table.rows()[0].key.pct, IN_DOMAIN);
}

/// The desk-scale source set: 256 images at 32x32, default pretraining.
#[test]
fn desk_pretraining_halves_the_loss() {
    let dir = tempfile::tempdir().unwrap();
    let plan = ExperimentPlan::default();
    let src = prepare_dataset(&plan, "source", plan.source_counts, dir.path()).unwrap();
    let (_, report) = run_pretrain(&plan, Variant::Sdc, 0, &src, None).unwrap();
    let (first, last) = (report.epoch_losses[0], *report.epoch_losses.last().unwrap());
    assert_eq!(report.epoch_losses.len(), 30);
    assert!(last < 0.5 * first, "{first} -> {last}");
}
