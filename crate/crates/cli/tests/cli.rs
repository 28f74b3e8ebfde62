use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use csi_ident_cli::commands::{cmd_heatmap, cmd_synth, CHECKPOINT_FILE, METRICS_FILE};
use csi_ident_cli::{MetricsDocument, RunConfig};

fn csi_ident(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csi-ident"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(cwd: &Path, args: &[&str]) -> String {
    let out = csi_ident(cwd, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn cfg(pairs: &[(&str, &str)]) -> RunConfig {
    let flags: Vec<(String, String)> = pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    RunConfig::load(None, &flags).unwrap()
}

fn metrics(run: &Path) -> MetricsDocument {
    serde_json::from_str(&std::fs::read_to_string(run.join(METRICS_FILE)).unwrap()).unwrap()
}

/// Three short sessions, enough for 100-row windows in every split.
const SMALL: [&str; 3] = ["--synth.classes=3", "--synth.duration_s=30", "--seed=4"];

fn small_corpus(cwd: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let run = format!("--run.name={name}");
    let mut args = vec!["synth", run.as_str()];
    args.extend(SMALL);
    args.extend(extra);
    ok(cwd, &args);
    cwd.join("runs").join(name).join("manifest.txt")
}

#[test]
fn synth_writes_one_log_per_class_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let a = cmd_synth(&cfg(&[("run.out_dir", out_dir), ("run.name", "a")])).unwrap();
    assert_eq!(a.sessions.len(), 6);
    let manifest = std::fs::read_to_string(&a.manifest).unwrap();
    let lines = manifest.lines().filter(|l| !l.trim_start().starts_with('#')).count();
    assert_eq!(lines, 6);
    assert!(a.run_dir.join("config.txt").exists());

    let b = cmd_synth(&cfg(&[("run.out_dir", out_dir), ("run.name", "b")])).unwrap();
    for (x, y) in a.sessions.iter().zip(&b.sessions) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }
    let two = cmd_synth(&cfg(&[
        ("run.out_dir", out_dir),
        ("synth.classes", "2"),
        ("synth.duration_s", "5"),
    ]))
    .unwrap();
    assert_eq!(two.sessions.len(), 2);
    assert!(two.run_dir.file_name().unwrap().to_str().unwrap().starts_with("synth-"));
}

#[test]
fn train_then_eval_agree_and_checkpoint_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    let manifest = small_corpus(cwd, "data", &[]);
    let m = manifest.to_str().unwrap();
    let out = ok(cwd, &["train", m, "--model.kind=mlp", "--train.max_epochs=3", "--train.patience=3", "--seed=4", "--run.name=mlp"]);
    assert!(out.contains("Accuracy"), "{out}");
    let run = cwd.join("runs/mlp");
    for f in ["model.csim", "metrics.json", "metrics.txt", "history.csv", "config.txt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let doc = metrics(&run);
    assert_eq!(doc.model, "mlp");
    assert!((0.0..=1.0).contains(&doc.macro_f1));
    assert_eq!(doc.seed, 4);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join(METRICS_FILE)).unwrap()).unwrap();
    for key in ["model", "accuracy", "macro_f1", "macro_precision", "macro_recall", "confusion", "epochs_run", "best_epoch", "seed"] {
        assert!(json.get(key).is_some(), "{key}");
    }

    let ckpt = run.join(CHECKPOINT_FILE);
    let c = ckpt.to_str().unwrap();
    ok(cwd, &["eval", c, m, "--run.name=eval"]);
    assert_eq!(metrics(&cwd.join("runs/eval")), doc);

    // K=26 data against a K=52 checkpoint
    let narrow = small_corpus(cwd, "narrow", &["--synth.subcarriers=26"]);
    let out = csi_ident(cwd, &["eval", c, narrow.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    let out = csi_ident(cwd, &["eval", c, m, "--model.kind=cnn"]);
    assert_eq!(out.status.code(), Some(3));

    let mut bytes = std::fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    let bad = cwd.join("bad.csim");
    std::fs::write(&bad, &bytes).unwrap();
    let out = csi_ident(cwd, &["eval", bad.to_str().unwrap(), m]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint integrity"));

    let out = csi_ident(cwd, &["eval", "missing.csim", m]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn echoed_config_reproduces_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    let manifest = small_corpus(cwd, "data", &[]);
    let m = manifest.to_str().unwrap();
    ok(cwd, &["train", m, "--model.kind=mlp", "--train.max_epochs=2", "--train.patience=2", "--run.name=first"]);
    let echoed = cwd.join("runs/first/config.txt");
    ok(cwd, &["train", m, "--config", echoed.to_str().unwrap(), "--run.name=second"]);
    for f in ["history.csv", "metrics.json", "model.csim"] {
        assert_eq!(
            std::fs::read(cwd.join("runs/first").join(f)).unwrap(),
            std::fs::read(cwd.join("runs/second").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn input_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    let out = csi_ident(cwd, &["train", "nowhere/manifest.txt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere/manifest.txt"));
    assert!(!cwd.join("runs").exists(), "no run directory for a failed input");

    let out = csi_ident(cwd, &["synth", "--hampel.windw=9"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("hampel.windw"));

    let out = csi_ident(cwd, &["synth", "--train.lr=abc"]);
    assert_eq!(out.status.code(), Some(2));
    let out = csi_ident(cwd, &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));

    std::fs::write(cwd.join("bad.cfg"), "hampel.window 9\n").unwrap();
    let out = csi_ident(cwd, &["synth", "--config", "bad.cfg"]);
    assert_eq!(out.status.code(), Some(2));

    let keys = ok(cwd, &["keys"]);
    assert!(keys.contains("hampel.window") && keys.contains("model.kind"));
}

#[test]
fn preprocess_writes_a_loadable_dataset_cache() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    let manifest = small_corpus(cwd, "data", &[]);
    ok(cwd, &["preprocess", manifest.to_str().unwrap(), "--run.name=pre"]);
    let ds = csi_ident::dataset::read_dataset_cache(cwd.join("runs/pre/dataset.csiw")).unwrap();
    assert_eq!(ds.class_count, 3);
    assert_eq!((ds.window_len, ds.subcarriers), (100, 52));
    assert!(!ds.train.is_empty() && !ds.val.is_empty() && !ds.test.is_empty());
}

#[test]
fn ingest_reports_the_session() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    let manifest = small_corpus(cwd, "data", &[]);
    let log = manifest.with_file_name("class_1.csv");
    let out = ok(cwd, &["ingest", log.to_str().unwrap(), "--run.name=ing"]);
    assert!(out.contains("packets      3000"), "{out}");
    let report = std::fs::read_to_string(cwd.join("runs/ing/report.txt")).unwrap();
    assert!(report.contains("records=3000\nk=52\n"));
    assert!(report.contains("malformed_lines=0"));
}

#[test]
fn heatmap_grids() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    let manifest = small_corpus(cwd, "data", &["--synth.empty_room=true"]);
    let out_dir = cwd.join("runs");
    let base = [("run.out_dir", out_dir.to_str().unwrap())];
    let with = cmd_heatmap(&manifest.with_file_name("class_0.csv"), &cfg(&[base[0], ("heatmap.pgm", "true")])).unwrap();
    assert_eq!(with.grid.dim(), (200, 52));
    let csv = std::fs::read_to_string(&with.csv).unwrap();
    assert_eq!(csv.lines().count(), 201);
    assert!(csv.starts_with("time_s,sc-26,"));
    assert_eq!(csv.lines().nth(2).unwrap().split(',').count(), 53);
    let pgm = std::fs::read(with.pgm.unwrap()).unwrap();
    assert!(pgm.starts_with(b"P5\n200 52\n255\n"));
    assert_eq!(pgm.len(), b"P5\n200 52\n255\n".len() + 200 * 52);

    let empty = cmd_heatmap(&manifest.with_file_name("empty_room.csv"), &cfg(&base)).unwrap();
    assert!(with.variance > empty.variance, "{} vs {}", with.variance, empty.variance);

    let pre = cmd_heatmap(
        &manifest.with_file_name("class_0.csv"),
        &cfg(&[base[0], ("heatmap.stage", "preprocessed"), ("heatmap.start_s", "1")]),
    )
    .unwrap();
    assert_eq!(pre.grid.dim(), (100, 52));
    assert_eq!(pre.sample_rate_hz, 50.0);

    let err = cmd_heatmap(&manifest.with_file_name("class_0.csv"), &cfg(&[base[0], ("heatmap.span_s", "31")])).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.message().contains("outside the session"));
}
