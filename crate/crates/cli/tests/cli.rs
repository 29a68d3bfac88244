use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lambda_kws::frontend::encode_wav;
use lambda_kws::model::ModelSpec;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lambda-kws"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn count_matches_the_model_counters() {
    let dir = tempfile::tempdir().unwrap();
    for (name, spec) in [
        ("lambda-resnet18", ModelSpec::lambda_resnet18(12)),
        ("lambda-resnet18-2", ModelSpec::lambda_resnet18_2(12)),
    ] {
        let o = cli(&["count", "--model", name, "--classes", "12", "--out", p(dir.path())]);
        assert_eq!(o.status.code(), Some(0));
        let out = stdout(&o);
        assert!(out.contains(&format!("parameters   {}", spec.count_params())), "{out}");
        assert!(out.contains(&format!("multiplies   {}", spec.count_flops(100).total())), "{out}");
    }
    assert!(dir.path().join("config.txt").exists());
    assert!(dir.path().join("count.json").exists());
}

#[test]
fn bench_writes_a_scaling_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(&["bench", "--layer", "lambda_conv", "--n", "64,128,256,512", "--reps", "2", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("scaling_lambda_conv.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("n,mean_ns,stderr_ns,peak_bytes"));
    let ns: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ns, ["64", "128", "256", "512"]);
}

#[test]
fn missing_config_is_a_usage_error_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = cli(&["train", "--config", p(&dir.path().join("absent.txt")), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert!(!out.exists());
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert_eq!(cli(&["count", "--set", "train.nope=1", "--out", p(&out)]).status.code(), Some(2));
    assert_eq!(cli(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(cli(&["bench", "--layer", "mlp"]).status.code(), Some(2));
    assert_eq!(cli(&["train", "--out", p(&out)]).status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn domain_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(&["bench", "--layer", "attention", "--n", "64,128,256", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    let o = cli(&["features", "--input", p(&dir.path().join("none.wav")), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn features_are_forty_by_one_hundred() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("tone.wav");
    let x: Vec<f64> = (0..16000).map(|i| 0.3 * (i as f64 * 0.2).sin()).collect();
    fs::write(&wav, encode_wav(&x, 16000).unwrap()).unwrap();
    let o = cli(&["features", "--input", p(&wav), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(0));
    let csv = fs::read_to_string(dir.path().join("features.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 40);
    assert!(rows.iter().all(|r| r.split(',').count() == 100));
}

#[test]
fn synthetic_fetch_train_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let run = dir.path().join("run");
    let o = cli(&["fetch", "--synthetic", "--clips-per-keyword", "4", "--speakers", "20", "--dataset-root", p(&root)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let tiny = [
        "model.stem_channels=4",
        "model.stage_channels=4",
        "model.blocks_per_stage=1",
        "model.block_strides=2",
        "model.heads=2",
        "model.key_depth=2",
        "model.scope=5",
        "train.max_epochs=1",
        "train.batch_size=16",
    ];
    let mut args = vec!["train", "--subtask", "35", "--dataset-root", p(&root), "--out", p(&run)];
    for t in &tiny {
        args.extend(["--set", t]);
    }
    let o = cli(&args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.txt", "manifest.csv", "metrics.jsonl", "best.ckpt", "last.ckpt", "test_roc.csv", "test.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let snapshot = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(snapshot.contains("data.subtask=35"));
    assert!(snapshot.contains("model.stem_channels=4"));

    let ev = dir.path().join("eval");
    let ckpt = run.join("best.ckpt");
    let o = cli(&["eval", "--checkpoint", p(&ckpt), "--subtask", "35", "--dataset-root", p(&root), "--out", p(&ev)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(ev.join("test_roc.csv")).unwrap(), fs::read(run.join("test_roc.csv")).unwrap());

    let o = cli(&["eval", "--checkpoint", p(&ckpt), "--subtask", "10", "--dataset-root", p(&root), "--out", p(&ev)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn shipped_recipe_parses() {
    let dir = tempfile::tempdir().unwrap();
    let recipe = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/full-recipe.conf");
    let o = cli(&["count", "--config", p(&recipe), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let snapshot = fs::read_to_string(dir.path().join("config.txt")).unwrap();
    assert!(snapshot.contains("train.batch_size=256"));
    assert!(snapshot.contains("augment.noise.p=0.7"));
}
