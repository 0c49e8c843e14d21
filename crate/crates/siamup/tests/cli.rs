//! End-to-end exercises of the command-line surface: synth -> train ->
//! track -> eval, plus the error-path contracts (exit codes, machine-
//! readable stderr, config validation).

use std::path::Path;
use std::process::{Command, Output};

fn siamup(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_siamup"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_small_config(path: &Path) {
    let config = serde_json::json!({
        "seed": 5,
        "synth": {
            "frame_size": 96,
            "length": 6,
            "object_size": 12.0,
            "count": 2,
            "occlusions": [],
            "blurs": []
        },
        "train": {
            "epochs": 2,
            "warmup_epochs": 1,
            "pairs_per_epoch": 4,
            "batch_size": 2,
            "max_frame_gap": 5
        }
    });
    std::fs::write(path, serde_json::to_vec_pretty(&config).unwrap()).unwrap();
}

#[test]
fn synth_train_track_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    write_small_config(&config);
    let data = dir.path().join("data");
    let run = dir.path().join("run");

    // synth
    let out = siamup(&[
        "synth",
        "--config",
        config.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "synth: {}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("synth_0005/img/0001.png").exists());
    assert!(data.join("synth_0005/groundtruth_rect.txt").exists());
    assert!(data.join("synth_0005/meta.json").exists());
    assert!(data.join("synth_0006").exists());
    assert!(data.join("config_echo.json").exists());
    assert!(data.join("run_meta.json").exists());

    // train
    let out = siamup(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "train: {}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,epoch,lr,loss_basic_cls,loss_basic_reg,loss_update_cls,loss_update_reg,loss_overall_cls,loss_overall_reg,loss_total"
    );
    assert_eq!(lines.count(), 4, "2 epochs x 2 steps");
    assert!(run.join("checkpoints/epoch_001.ckpt").exists());
    assert!(run.join("checkpoints/epoch_002.ckpt").exists());
    let ckpt = run.join("checkpoint.ckpt");
    assert!(ckpt.exists());

    // track
    let results = dir.path().join("results");
    let out = siamup(&[
        "track",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--sequence",
        data.join("synth_0005").to_str().unwrap(),
        "--out",
        results.join("synth_0005.txt").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "track: {}", String::from_utf8_lossy(&out.stderr));
    let result_text = std::fs::read_to_string(results.join("synth_0005.txt")).unwrap();
    assert_eq!(result_text.lines().count(), 6, "one line per frame");
    for line in result_text.lines() {
        assert_eq!(line.split(',').count(), 5, "x,y,w,h,confidence");
    }
    // Second sequence too, so eval sees a directory of results.
    let out = siamup(&[
        "track",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--sequence",
        data.join("synth_0006").to_str().unwrap(),
        "--out",
        results.join("synth_0006.txt").to_str().unwrap(),
    ]);
    assert!(out.status.success());

    // eval
    let report = dir.path().join("report");
    let plots = dir.path().join("plots");
    let out = siamup(&[
        "eval",
        "--results",
        results.to_str().unwrap(),
        "--gt",
        data.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
        "--plots",
        plots.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "eval: {}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(report.join("report.csv")).unwrap();
    assert!(csv.contains("synth_0005"));
    assert!(csv.contains("AGGREGATE"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["per_sequence"].as_array().unwrap().len(), 2);
    for f in [
        "success_curve.csv",
        "precision_curve.csv",
        "success_plot.png",
        "precision_plot.png",
    ] {
        assert!(plots.join(f).exists(), "missing {f}");
    }
}

#[test]
fn track_no_update_flag_equals_disabled_update_at_init() {
    // With a freshly initialized (zero-fusion) checkpoint the two variants
    // must produce byte-identical result files even though refreshes fire.
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    write_small_config(&config);
    let data = dir.path().join("data");
    let out = siamup(&["synth", "--config", config.to_str().unwrap(), "--out", data.to_str().unwrap()]);
    assert!(out.status.success());

    // Untrained checkpoint with a low confidence threshold so the update
    // path actually runs.
    let mut cfg = siamup::config::RunConfig::load(&config).unwrap();
    cfg.tracker.confidence_threshold = 0.05;
    cfg.tracker.refresh_period = 2;
    let model = siamup::model::Model::init(&cfg.model, cfg.seed).unwrap();
    let ckpt = dir.path().join("init.ckpt");
    siamup::checkpoint::save(&ckpt, &model, &cfg, 0, 0).unwrap();

    let a = dir.path().join("with_update.txt");
    let b = dir.path().join("no_update.txt");
    let seq = data.join("synth_0005");
    let out = siamup(&[
        "track", "--checkpoint", ckpt.to_str().unwrap(),
        "--sequence", seq.to_str().unwrap(), "--out", a.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = siamup(&[
        "track", "--checkpoint", ckpt.to_str().unwrap(),
        "--sequence", seq.to_str().unwrap(), "--out", b.to_str().unwrap(),
        "--no-update",
    ]);
    assert!(out.status.success());
    let with_update = std::fs::read(&a).unwrap();
    let without = std::fs::read(&b).unwrap();
    assert_eq!(with_update, without, "zero-initialized fusion must make update a no-op");
    // The update variant did fire refreshes (low threshold, short period).
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("refresh"), "{stdout}");
}

#[test]
fn unknown_config_key_exits_2_with_key_path() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    std::fs::write(&config, r#"{ "train": { "lr_peek": 0.1 } }"#).unwrap();
    let out = siamup(&["gradcheck", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("lr_peek"), "{stderr}");
    assert!(stderr.contains("\"code\":2"), "machine-readable line: {stderr}");
}

#[test]
fn gradcheck_passes_and_prints_per_module_errors() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(&config, "{}").unwrap();
    let out = siamup(&["gradcheck", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    for module in ["fusion", "rpn", "backbone", "loss"] {
        assert!(stdout.contains(&format!("gradcheck {module}:")), "{stdout}");
    }
    assert!(stdout.contains("max rel err"), "{stdout}");
}

#[test]
fn usage_errors_exit_1() {
    let out = siamup(&["track", "--bogus-flag"]);
    assert_eq!(out.status.code(), Some(1));
    let out = siamup(&["not-a-command"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_exits_0() {
    let out = siamup(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("siamup"));
}

#[test]
fn missing_data_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    write_small_config(&config);
    let out = siamup(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--data",
        dir.path().join("nope").to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
