use std::path::Path;
use std::process::{Command, Output};

use himode::config::{ModelConfig, RunConfig};

fn himode(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_himode"))
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// A config file for a miniature model so commands finish quickly.
fn small_config(dir: &Path) -> String {
    let mut cfg = RunConfig {
        model: ModelConfig::tiny().with_resolution(16, 32),
        ..RunConfig::default()
    };
    cfg.optim.batch_size = 2;
    cfg.optim.steps = Some(2);
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path.to_str().unwrap().to_string()
}

fn synth(dir: &Path, cfg: &str, count: &str) -> String {
    let data = dir.join("data");
    let out = himode(&[
        "synth",
        "--config",
        cfg,
        "--out",
        data.to_str().unwrap(),
        "--count",
        count,
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    data.join("manifest.jsonl").to_str().unwrap().to_string()
}

#[test]
fn train_eval_predict_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let manifest = synth(dir.path(), &cfg, "10");
    assert_eq!(
        std::fs::read_to_string(&manifest).unwrap().lines().count(),
        10
    );
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();

    let out = himode(&[
        "train",
        "--config",
        &cfg,
        "--manifest",
        &manifest,
        "--out",
        run_s,
        "--seed",
        "3",
        "--attention",
        "mhsa",
        "--no-stp",
        "--steps",
        "3",
        "--model.d_max",
        "8.0",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "checkpoint.bin",
        "train_log.json",
        "config.json",
        "val_metrics.csv",
        "val_metrics.json",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    let saved = RunConfig::load(&run.join("config.json")).unwrap();
    assert_eq!(saved.seed, 3);
    assert_eq!(saved.optim.steps, Some(3));
    assert_eq!(saved.model.d_max, 8.0);
    assert!(!saved.model.use_stp);
    assert_eq!(saved.model.attention, himode::config::AttentionKind::Mhsa);

    let ck = run.join("checkpoint.bin");
    let ck_s = ck.to_str().unwrap();
    let out = himode(&[
        "eval",
        "--checkpoint",
        ck_s,
        "--out",
        run_s,
        "--align",
        "none",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("abs_rel"));
    let csv = std::fs::read_to_string(run.join("test_metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 1 + 1);

    let image = dir.path().join("data/room00000.png");
    let pred = dir.path().join("pred");
    let out = himode(&[
        "predict",
        "--checkpoint",
        ck_s,
        "--image",
        image.to_str().unwrap(),
        "--out",
        pred.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["depth.pfm", "depth16.png", "depth_color.png", "depth.json"] {
        assert!(pred.join(f).exists(), "{f}");
    }
}

#[test]
fn missing_files_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let nowhere = dir.path().join("none.bin");
    let out = himode(&["eval", "--checkpoint", nowhere.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    let bad = dir.path().join("m.jsonl");
    std::fs::write(&bad, "{\"id\": 1}\n").unwrap();
    let out = himode(&["train", "--manifest", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&himode(&[])), 1);
    assert_eq!(code(&himode(&["params", "--bogus"])), 1);
    assert_eq!(code(&himode(&["params", "--no-such-key", "3"])), 1);
    assert_eq!(code(&himode(&["params", "--resolution", "256by512"])), 1);
    assert_eq!(code(&himode(&["params", "--attention", "lstm"])), 1);
    assert_eq!(code(&himode(&["params", "--embed_dim", "7"])), 1);
    assert_eq!(code(&himode(&["gradcheck", "--block", "lstm"])), 1);
    assert_eq!(code(&himode(&["--help"])), 0);
}

#[test]
fn params_lists_groups_and_arms() {
    let out = himode(&["params"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    for needle in [
        "backbone",
        "srb1",
        "cal",
        "total",
        "+srb +sca -mhsa +stp",
        "-srb +sca -mhsa -stp",
    ] {
        assert!(text.contains(needle), "{needle}");
    }
    let hi = himode(&["params", "--resolution", "512x1024"]);
    let total = |s: &str| {
        s.lines()
            .find(|l| l.starts_with("total"))
            .unwrap()
            .to_string()
    };
    assert_eq!(total(&text), total(&stdout(&hi)));
    let no_srb = himode(&["params", "--no-srb"]);
    assert_ne!(total(&text), total(&stdout(&no_srb)));
}

#[test]
fn gradient_check_exit_codes() {
    let out = himode(&["gradcheck", "--block", "srb"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("PASS"));
    let out = himode(&["gradcheck", "--block", "encoder", "--fault", "matmul"]);
    assert_eq!(code(&out), 3);
    assert!(stdout(&out).contains("FAIL"));
}

#[test]
fn ablate_writes_six_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let manifest = synth(dir.path(), &cfg, "3");
    let out_dir = dir.path().join("abl");
    let out = himode(&[
        "ablate",
        "--config",
        &cfg,
        "--manifest",
        &manifest,
        "--out",
        out_dir.to_str().unwrap(),
        "--steps",
        "1",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(stdout(&out).contains("stp audit: true"));
}
