use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mdir::Image;

fn mdir(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdir"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        o.status.code(),
        stdout(o),
        String::from_utf8_lossy(&o.stderr)
    );
}

/// Ten 32x32 scenes synthesized ten times per category.
fn dataset(root: &Path) -> PathBuf {
    let clean = root.join("clean");
    let data = root.join("data");
    assert_ok(&mdir(&["gen-clean", "--out-dir", p(&clean), "--count", "10", "--size", "32"]));
    let o = mdir(&[
        "synth",
        "--clean-dir",
        p(&clean),
        "--out-dir",
        p(&data),
        "--per-category",
        "10",
        "--size",
        "32",
        "--seed",
        "3",
    ]);
    assert_ok(&o);
    assert!(stdout(&o).contains("70 files reported"), "{}", stdout(&o));
    data
}

fn tiny_train_args<'a>(data: &'a str, out: &'a str) -> Vec<&'a str> {
    vec![
        "train",
        "--data",
        data,
        "--out-dir",
        out,
        "--steps",
        "3",
        "--batch-size",
        "2",
        "--crop",
        "16",
        "--base-channels",
        "4",
        "--res-blocks",
        "1",
        "--no-cfe",
        "--seed",
        "5",
    ]
}

#[test]
fn synth_counts_and_rerun_changes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let manifest = fs::read_to_string(data.join("manifest.jsonl")).unwrap();
    let rows: Vec<&str> = manifest.lines().filter(|l| !l.trim().is_empty()).collect();
    assert_eq!(rows.len(), 70);
    for row in &rows {
        let v: serde_json::Value = serde_json::from_str(row).unwrap();
        assert!(data.join(v["degraded"].as_str().unwrap()).is_file());
    }
    let clean = dir.path().join("clean");
    let again = mdir(&[
        "synth",
        "--clean-dir",
        p(&clean),
        "--out-dir",
        p(&data),
        "--per-category",
        "10",
        "--size",
        "32",
        "--seed",
        "3",
    ]);
    assert_ok(&again);
    assert!(stdout(&again).contains(", 0 files changed"), "{}", stdout(&again));
    assert_eq!(fs::read_to_string(data.join("manifest.jsonl")).unwrap(), manifest);
}

#[test]
fn synth_on_empty_input_fails_and_leaves_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = dir.path().join("out");
    let o = mdir(&["synth", "--clean-dir", p(&empty), "--out-dir", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let leftovers = fs::read_dir(&out).map(|d| d.count()).unwrap_or(0);
    assert_eq!(leftovers, 0);
}

#[test]
fn oracle_eval_reports_perfect_ssim() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let out = dir.path().join("eval");
    assert_ok(&mdir(&["eval", "--data", p(&data), "--oracle", "--out-dir", p(&out)]));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 7);
    for row in rows.iter().chain([&report["average"]]) {
        assert_eq!(row["ssim"].as_f64(), Some(1.0), "{row}");
        assert_eq!(row["psnr_infinite"].as_bool(), Some(true), "{row}");
        assert!(row["psnr"].is_null());
    }
}

#[test]
fn train_writes_run_directory_and_infer_keeps_size() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let run = dir.path().join("run");
    assert_ok(&mdir(&tiny_train_args(p(&data), p(&run))));
    for f in ["config.json", "train_log.csv", "checkpoints/last.ckpt", "checkpoints/best.ckpt", "report.json"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert!(log.starts_with("step,lr,loss\n"));
    assert_eq!(log.lines().count(), 4);
    let config: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["net"]["base_channels"], 4);
    assert_eq!(config["net"]["use_cfe"], false);
    assert_eq!(config["train"]["max_steps"], 3);

    let input = dir.path().join("in.png");
    Image::from_fn(20, 28, |c, y, x| ((c + y + x) % 9) as f32 / 8.0).save_png(&input).unwrap();
    let output = dir.path().join("out.png");
    let ckpt = run.join("checkpoints/last.ckpt");
    assert_ok(&mdir(&["infer", "--checkpoint", p(&ckpt), "--input", p(&input), "--output", p(&output)]));
    let restored = Image::load_png(&output).unwrap();
    assert_eq!((restored.height, restored.width), (20, 28));

    let odd = dir.path().join("odd.png");
    Image::filled(10, 12, 0.5).save_png(&odd).unwrap();
    let o = mdir(&["infer", "--checkpoint", p(&ckpt), "--input", p(&odd), "--output", p(&output)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn training_twice_with_one_seed_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_ok(&mdir(&tiny_train_args(p(&data), p(&a))));
    assert_ok(&mdir(&tiny_train_args(p(&data), p(&b))));
    let read = |d: &Path| fs::read(d.join("checkpoints/last.ckpt")).unwrap();
    assert_eq!(read(&a), read(&b));
    let log = |d: &Path| fs::read_to_string(d.join("train_log.csv")).unwrap();
    assert_eq!(log(&a), log(&b));
}

#[test]
fn classifier_then_conditioned_training() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"train": {"classifier_epochs": 1}}"#).unwrap();
    let cls = dir.path().join("cls");
    let o = mdir(&["train-classifier", "--data", p(&data), "--out-dir", p(&cls), "--config", p(&cfg)]);
    assert_ok(&o);
    assert!(stdout(&o).contains("per-label F1"));
    for f in ["classifier.ckpt", "train_log.csv", "report.json", "config.json"] {
        assert!(cls.join(f).is_file(), "missing {f}");
    }

    let run = dir.path().join("run");
    let base = [
        "train", "--data", p(&data), "--out-dir", p(&run), "--steps", "2", "--batch-size", "2", "--crop", "16",
        "--base-channels", "4", "--res-blocks", "1",
    ];
    // Condition embedding needs the classifier weights.
    assert_eq!(mdir(&base).status.code(), Some(2));
    let mut args = base.to_vec();
    let ckpt = cls.join("classifier.ckpt");
    args.extend(["--classifier", p(&ckpt)]);
    assert_ok(&mdir(&args));
    assert!(run.join("checkpoints/last.ckpt").is_file());
}

#[test]
fn bad_inputs_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = dir.path().join("out");
    let o = mdir(&["eval", "--data", p(&missing), "--oracle", "--out-dir", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let o = mdir(&["train", "--data", p(&missing), "--out-dir", p(&out), "--no-cfe"]);
    assert_eq!(o.status.code(), Some(2));

    let data = dataset(dir.path());
    let o = mdir(&["eval", "--data", p(&data), "--checkpoint", p(&missing), "--out-dir", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let o = mdir(&["infer", "--checkpoint", p(&missing), "--input", p(&missing), "--output", p(&out)]);
    assert_eq!(o.status.code(), Some(2));

    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"train": {"learning_rate": 0.1}}"#).unwrap();
    let o = mdir(&["train", "--data", p(&data), "--out-dir", p(&out), "--config", p(&cfg), "--no-cfe"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn gradcheck_passes_on_a_fresh_build() {
    let dir = tempfile::tempdir().unwrap();
    let o = mdir(&["gradcheck", "--cases", "2", "--out-dir", p(dir.path())]);
    assert_ok(&o);
    assert!(!stdout(&o).contains("FAIL"));
    assert!(dir.path().join("gradcheck.txt").is_file());
}
