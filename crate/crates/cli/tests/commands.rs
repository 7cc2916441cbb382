use std::path::{Path, PathBuf};
use std::process::Command;

use robustcast_cli::commands::{self, BenchRow};
use robustcast_cli::config::RunConfig;
use robustcast_cli::Overrides;
use robustcast_core::data;
use robustcast_core::perturb::PerturbKind;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_robustcast"))
}

/// The fixture config with `extra` appended, written into `dir`.
fn config_with(dir: &Path, edit: impl FnOnce(&mut RunConfig)) -> PathBuf {
    let mut cfg = RunConfig::load(&fixture("sine.toml")).unwrap();
    edit(&mut cfg);
    let path = dir.join("run.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

fn overrides(config: PathBuf, out: PathBuf) -> Overrides {
    Overrides { config: Some(config), out: Some(out), ..Overrides::default() }
}

#[test]
fn zero_epochs_writes_initial_checkpoint_and_empty_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config_with(tmp.path(), |c| c.train.epochs = 0);
    let out = tmp.path().join("out");
    commands::train(&overrides(cfg, out.clone()), &mut Vec::new()).unwrap();
    let trace = std::fs::read_to_string(out.join(commands::LOSS_TRACE_FILE)).unwrap();
    assert_eq!(trace, "epoch,horizon,train_loss,val_loss\n");
    let ckpt = robustcast_core::checkpoint::Checkpoint::load(out.join(commands::CHECKPOINT_FILE)).unwrap();
    let fresh = robustcast_core::Model::new(ckpt.models[0].config.clone()).unwrap();
    assert_eq!(ckpt.model_for(24).unwrap().store.snapshot(), fresh.store.snapshot());
}

#[test]
fn training_beats_untrained_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    let out = commands::train(&overrides(fixture("sine.toml"), tmp.path().to_path_buf()), &mut Vec::new()).unwrap();
    let h = &out.horizons[0];
    assert!(h.final_val_mae.unwrap() < h.initial_val_mae.unwrap(), "{h:?}");
}

#[test]
fn eval_reports_one_row_per_horizon_and_metric() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config_with(tmp.path(), |c| {
        c.train.epochs = 1;
        c.eval.horizons = vec![12, 24];
    });
    let o = overrides(cfg, tmp.path().join("out"));
    commands::train(&o, &mut Vec::new()).unwrap();
    let results = commands::eval(&o, None, &mut Vec::new()).unwrap();
    assert_eq!(results.len(), 2);
    let csv = std::fs::read_to_string(tmp.path().join("out").join(commands::METRICS_CSV)).unwrap();
    // header + 2 horizons × 4 metrics (extended)
    assert_eq!(csv.lines().count(), 1 + 2 * 4);
    assert!(csv.lines().nth(1).unwrap().starts_with("12,mse,"));
}

#[test]
fn eval_rejects_missing_horizon_listing_available() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config_with(tmp.path(), |c| c.train.epochs = 0);
    let out = tmp.path().join("out");
    commands::train(&overrides(cfg.clone(), out.clone()), &mut Vec::new()).unwrap();
    let status = bin()
        .args(["eval", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(["--horizons", "96,192,336,720"])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&status.stderr);
    assert!(stderr.contains("available horizons: [24]"), "{stderr}");
}

#[test]
fn perturb_zero_ratio_keeps_values() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("same.csv");
    let o = Overrides { perturb_kind: Some(PerturbKind::WhiteNoise), ..Overrides::default() };
    let report = commands::perturb(&o, &fixture("sine.csv"), &out, Some(0.0), &mut Vec::new()).unwrap();
    assert!(report.channels.iter().all(|c| c.modified == 0));
    let a = data::load_csv(fixture("sine.csv")).unwrap();
    let b = data::load_csv(&out).unwrap();
    assert_eq!(a.values, b.values);
    assert_eq!(a.index, b.index);
}

#[test]
fn perturb_missing_reports_segment_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("short.csv");
    let mut text = String::from("t,a,b\n");
    for t in 0..24 {
        text.push_str(&format!("{t},{},{}\n", 1.0 + t as f64, 5.0 - 0.5 * t as f64));
    }
    std::fs::write(&input, text).unwrap();
    let out = tmp.path().join("holes.csv");
    let o = Overrides { perturb_kind: Some(PerturbKind::Missing), seed: Some(4), ..Overrides::default() };
    let report = commands::perturb(&o, &input, &out, Some(0.5), &mut Vec::new()).unwrap();
    assert!(report.channels.iter().all(|c| c.modified == 12), "{report:?}");
    let sidecar: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(commands::report_path(&out)).unwrap()).unwrap();
    assert_eq!(sidecar["channels"][1]["modified"], 12);
    let zeros = data::load_csv(&out).unwrap().values.iter().filter(|&&v| v == 0.0).count();
    assert_eq!(zeros, 24);
}

#[test]
fn perturb_is_byte_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let status = bin()
            .args(["perturb", "--perturb-kind", "anomalies", "--level", "0.1", "--seed", "9", "--input"])
            .arg(fixture("sine.csv"))
            .arg("--output")
            .arg(&out)
            .output()
            .unwrap();
        assert!(status.status.success());
        (std::fs::read(&out).unwrap(), std::fs::read(commands::report_path(&out)).unwrap())
    };
    assert_eq!(run("a.csv"), run("b.csv"));
}

#[test]
fn out_of_range_ratio_exits_with_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let status = bin()
        .args(["perturb", "--perturb-kind", "white-noise", "--level", "1.5", "--input"])
        .arg(fixture("sine.csv"))
        .arg("--output")
        .arg(tmp.path().join("x.csv"))
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&status.stderr).contains("r_noise"));
}

#[test]
fn missing_seed_exits_with_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    std::fs::write(&path, "[model]\nlookback = 48\n").unwrap();
    let status = bin().args(["train", "--config"]).arg(&path).output().unwrap();
    assert_eq!(status.status.code(), Some(2));
}

#[test]
fn robustbench_rows_and_clean_level() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config_with(tmp.path(), |c| {
        c.train.epochs = 2;
        c.robustbench.kinds = vec![PerturbKind::WhiteNoise];
    });
    let rows = commands::robustbench(&overrides(cfg.clone(), tmp.path().join("bench")), &mut Vec::new()).unwrap();
    let labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["ori", "1%", "5%", "10%", "15%", "avg"]);
    let avg: f64 = rows[1..5].iter().map(|r| r.mse).sum::<f64>() / 4.0;
    assert!((rows[5].mse - avg).abs() < 1e-12);

    let csv = std::fs::read_to_string(tmp.path().join("bench").join(commands::BENCH_CSV)).unwrap();
    for metric in ["mse", "mae"] {
        let n = csv.lines().filter(|l| l.contains(&format!(",{metric},"))).count();
        assert_eq!(n, 6, "{metric}");
    }

    // level 0 must equal a clean train + eval with the same seed
    let o = overrides(cfg, tmp.path().join("clean"));
    commands::train(&o, &mut Vec::new()).unwrap();
    let clean = commands::eval(&o, None, &mut Vec::new()).unwrap();
    let ori: &BenchRow = &rows[0];
    assert_eq!(clean[0].metrics[0], ("mse".to_string(), ori.mse));
    assert_eq!(clean[0].metrics[1], ("mae".to_string(), ori.mae));
}

#[test]
fn test_only_mode_scores_one_clean_model() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config_with(tmp.path(), |c| {
        c.train.epochs = 1;
        c.robustbench.kinds = vec![PerturbKind::DistributionShift];
        c.robustbench.mode = robustcast_cli::config::BenchMode::TestOnly;
    });
    let o = Overrides { level_grid: Some(vec![0.0, 3.0]), ..overrides(cfg, tmp.path().join("bench")) };
    let rows = commands::robustbench(&o, &mut Vec::new()).unwrap();
    let labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["ori", "3", "avg"]);
    assert_ne!(rows[0].mse, rows[1].mse);
}

#[test]
fn verify_exit_codes() {
    let ok = bin().arg("verify").output().unwrap();
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).lines().all(|l| !l.starts_with("FAIL")));

    let bad = bin().args(["verify", "--inject-fault", "exp"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&bad.stdout);
    assert!(stdout.contains("FAIL grad:exp"), "{stdout}");
    assert!(String::from_utf8_lossy(&bad.stderr).contains("grad:exp"));

    let unknown = bin().args(["verify", "--inject-fault", "nope"]).output().unwrap();
    assert_eq!(unknown.status.code(), Some(2));
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config_with(tmp.path(), |c| c.train.epochs = 1);
    let a = commands::train(&Overrides { seed: Some(1), ..overrides(cfg.clone(), tmp.path().join("a")) }, &mut Vec::new()).unwrap();
    let b = commands::train(&Overrides { seed: Some(2), ..overrides(cfg, tmp.path().join("b")) }, &mut Vec::new()).unwrap();
    assert_ne!(a.horizons[0].report.trace, b.horizons[0].report.trace);
    let snap = std::fs::read_to_string(tmp.path().join("a").join(commands::RESOLVED_CONFIG_FILE)).unwrap();
    assert!(snap.starts_with("seed = 1\n"), "{snap}");
}
