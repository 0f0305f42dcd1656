use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mhe(args: &[&str]) -> Output {
    mhe_env(args, &[])
}

fn mhe_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mhe"));
    cmd.args(args).env_remove("MHE_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> String {
    assert_eq!(code(&o), 0, "stderr: {}", stderr(&o));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Every file under `root`, relative path and bytes, sorted.
fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn small_data(dir: &Path, preset: &str) -> PathBuf {
    let out = dir.join(preset);
    ok(mhe(&[
        "gen",
        "--out",
        p(&out),
        "--set",
        &format!("preset={preset}"),
        "--set",
        "scene.height=16",
        "--set",
        "scene.width=16",
        "--set",
        "counts={train = 4, val = 1, test = 2}",
    ]));
    out
}

#[test]
fn gen_echoes_counts_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_data(dir.path(), "ahn");
    let echo = fs::read_to_string(a.join("config.toml")).unwrap();
    let cfg: toml::Table = echo.parse().unwrap();
    assert_eq!(cfg["counts"]["train"].as_integer(), Some(4));
    assert_eq!(cfg["counts"]["test"].as_integer(), Some(2));
    assert_eq!(cfg["preset"].as_str(), Some("ahn"));
    assert_eq!(fs::read_dir(a.join("train")).unwrap().count(), 8);

    // Re-running the echoed config elsewhere reproduces every byte.
    let b = dir.path().join("again");
    ok(mhe(&["gen", "-c", p(&a.join("config.toml")), "--out", p(&b)]));
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), tb.len());
    for ((pa, ba), (pb, bb)) in ta.iter().zip(&tb) {
        assert_eq!(pa, pb);
        if pa != Path::new("config.toml") && pa != Path::new("manifest.json") {
            assert_eq!(ba, bb, "{}", pa.display());
        }
    }

    let c = dir.path().join("other_seed");
    ok(mhe(&["gen", "-c", p(&a.join("config.toml")), "--out", p(&c), "--set", "seed=1"]));
    assert_ne!(fs::read(a.join("test/img_0.hmt")).unwrap(), fs::read(c.join("test/img_0.hmt")).unwrap());
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path());
    for args in [
        vec!["gen", "--out", out, "--set", "scene.density=1.5"],
        vec!["gen", "--out", out, "--set", "counts.trian=3"],
        vec!["gen", "--out", out, "--set", "no_equals_sign"],
        vec!["gen", "--out", out, "--set", "preset=atlantis"],
        vec!["train", "--out", out, "--set", "variant=\"sdc+foo\""],
        vec!["frobnicate"],
    ] {
        let o = mhe(&args);
        assert_eq!(code(&o), 2, "{args:?}: {}", stderr(&o));
        let err = stderr(&o);
        assert_eq!(err.trim_end().lines().count(), 1, "{err}");
        assert!(err.starts_with("error[config]: "), "{err}");
    }
    let bad_threads = mhe_env(&["gradcheck", "--out", out], &[("MHE_THREADS", "zero")]);
    assert_eq!(code(&bad_threads), 2);
}

#[test]
fn missing_files_exit_three_with_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no_such_dataset");
    let o = mhe(&["eval", "--out", p(&dir.path().join("e")), "--set", &format!("data=\"{}\"", p(&missing))]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).starts_with("error[io]: "));
    assert!(stderr(&o).contains(p(&missing)), "{}", stderr(&o));

    let data = small_data(dir.path(), "source");
    let ck = dir.path().join("nope.hmck");
    let o = mhe(&[
        "eval",
        "--out",
        p(&dir.path().join("e")),
        "--set",
        &format!("data=\"{}\"", p(&data)),
        "--set",
        &format!("checkpoint=\"{}\"", p(&ck)),
    ]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains(p(&ck)));
}

#[test]
fn train_finetune_eval_round() {
    let dir = tempfile::tempdir().unwrap();
    let src = small_data(dir.path(), "source");
    let tgt = small_data(dir.path(), "ahn");
    let small_model = ["--set", "model.channels=[4, 8]"];
    let train = |out: &Path, extra: &[&str]| {
        let mut args = vec!["train", "--out", p(out)];
        let data = format!("data=\"{}\"", p(&src));
        args.extend(["--set", &data]);
        args.extend(small_model);
        args.extend(extra);
        ok(mhe(&args))
    };

    // epochs = 0 writes the initialisation; resuming from it and training
    // matches training from scratch.
    let init = dir.path().join("init");
    train(&init, &["--set", "train.epochs=0"]);
    let init_ck = init.join("model.hmck");
    let init_again = dir.path().join("init_again");
    let from = format!("init_from=\"{}\"", p(&init_ck));
    train(&init_again, &["--set", "train.epochs=0", "--set", &from]);
    assert_eq!(fs::read(&init_ck).unwrap(), fs::read(init_again.join("model.hmck")).unwrap());

    let scratch = dir.path().join("scratch");
    train(&scratch, &["--set", "train.epochs=2"]);
    let resumed = dir.path().join("resumed");
    train(&resumed, &["--set", "train.epochs=2", "--set", &from]);
    assert_eq!(
        fs::read(scratch.join("model.hmck")).unwrap(),
        fs::read(resumed.join("model.hmck")).unwrap()
    );
    assert_eq!(fs::read_to_string(scratch.join("loss.csv")).unwrap().lines().count(), 3);

    // Fine-tuning defaults to 15 epochs.
    let ft = dir.path().join("ft");
    ok(mhe(&[
        "finetune",
        "--out",
        p(&ft),
        "--set",
        &format!("data=\"{}\"", p(&tgt)),
        "--set",
        &format!("checkpoint=\"{}\"", p(&scratch.join("model.hmck"))),
        "--set",
        "pct=25",
    ]));
    let echo: toml::Table = fs::read_to_string(ft.join("config.toml")).unwrap().parse().unwrap();
    assert_eq!(echo["finetune"]["epochs"].as_integer(), Some(15));
    assert_eq!(fs::read_to_string(ft.join("loss.csv")).unwrap().lines().count(), 16);
    assert!(ft.join("metrics.json").exists());

    // Architecture mismatch between variant and checkpoint.
    let o = mhe(&[
        "finetune",
        "--out",
        p(&dir.path().join("ft2")),
        "--set",
        &format!("data=\"{}\"", p(&tgt)),
        "--set",
        &format!("checkpoint=\"{}\"", p(&scratch.join("model.hmck"))),
        "--set",
        "variant=\"conv_baseline\"",
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let eval = |out: &Path, extra: &[&str]| {
        let mut args = vec!["eval", "--out", p(out)];
        let data = format!("data=\"{}\"", p(&tgt));
        args.extend(["--set", &data]);
        args.extend(extra);
        ok(mhe(&args));
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
        v
    };
    let gt = eval(&dir.path().join("gt"), &["--set", "predictor=\"ground_truth\""]);
    for k in ["mae", "rmse", "si_rmse", "msge"] {
        assert_eq!(gt[k].as_f64(), Some(0.0), "{k}");
    }
    let ck = format!("checkpoint=\"{}\"", p(&ft.join("model.hmck")));
    let e1 = eval(&dir.path().join("e1"), &["--set", &ck]);
    let e2 = eval(&dir.path().join("e2"), &["--set", &ck]);
    assert_eq!(e1, e2);
    assert_eq!(e1, serde_json::from_str::<serde_json::Value>(&fs::read_to_string(ft.join("metrics.json")).unwrap()).unwrap());
}

#[test]
fn gradcheck_passes_and_catches_the_flipped_dilation_rule() {
    let dir = tempfile::tempdir().unwrap();
    let clean = mhe(&["gradcheck", "--out", p(&dir.path().join("clean"))]);
    assert_eq!(code(&clean), 0, "{}", stderr(&clean));
    let report = fs::read_to_string(dir.path().join("clean/report.txt")).unwrap();
    assert!(report.contains("dilation") && report.contains("max_rel_err"));

    let bad = mhe(&[
        "gradcheck",
        "--out",
        p(&dir.path().join("bad")),
        "--set",
        "gradcheck.fault=\"flip_dilation_chain\"",
    ]);
    assert_eq!(code(&bad), 5);
    assert!(stderr(&bad).starts_with("error[check]: "));
    assert!(stderr(&bad).contains("sdc.dilation"));
}

const SMOKE_PLAN: &str = r#"
[plan]
targets = ["ahn"]
variants = ["conv_baseline", "sdc"]
seeds = [0]
pcts = [25.0]
height = 16
width = 16
source_counts = { train = 8, val = 0, test = 4 }
target_counts = { train = 8, val = 0, test = 4 }
model = { channels = [4, 8] }
pretrain = { epochs = 2 }
finetune = { epochs = 1 }
"#;

#[test]
fn bench_replays_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("plan.toml");
    fs::write(&cfg, SMOKE_PLAN).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let out_a = ok(mhe(&["bench", "-c", p(&cfg), "--out", p(&a)]));
    ok(mhe_env(&["bench", "-c", p(&cfg), "--out", p(&b)], &[("MHE_THREADS", "1")]));
    assert!(out_a.contains("conv_baseline") && out_a.contains("zero-shot"));

    let run = |root: &Path| fs::read_dir(root).unwrap().next().unwrap().unwrap().path();
    let (ra, rb) = (run(&a), run(&b));
    assert_eq!(ra.file_name(), rb.file_name());
    let header = "dataset,variant,init,pct,seed,mae,rmse,si_rmse,msge,n_images";
    let table = fs::read_to_string(ra.join("table.csv")).unwrap();
    assert_eq!(table.lines().next(), Some(header));
    assert_eq!(table.lines().count(), 1 + 2 * 4);
    for (pa, ba) in tree(&ra).iter().filter(|(p, _)| p.extension().is_some_and(|e| e == "csv")) {
        assert_eq!(ba, &fs::read(rb.join(pa)).unwrap(), "{}", pa.display());
    }

    // The echoed config re-runs into the same plan directory.
    let c = dir.path().join("c");
    ok(mhe(&["bench", "-c", p(&ra.join("config.toml")), "--out", p(&c)]));
    assert_eq!(fs::read(run(&c).join("table.csv")).unwrap(), table.as_bytes());
}
