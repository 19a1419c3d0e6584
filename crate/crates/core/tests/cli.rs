use std::path::Path;
use std::process::{Command, Output};

use banet::cli::*;
use banet::diffcore::checkpoint::Manifest;
use banet::net_decoder::PredictionFile;
use banet::Error;

fn banet(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_banet"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Two scenes, eight epochs; stage two starts at epoch 6.
const SMALL: &str = r#"{"seed": 3, "scenes": {"count": 2},
  "train": {"total_epochs": 8, "periods": [6], "stage2_start_epoch": 6, "batch_size": 1}}"#;

#[test]
fn lr_table_matches_the_schedule_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let o = banet(&["lr-table"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let rows: Vec<(usize, f64)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let mut it = l.split_whitespace();
            (it.next().unwrap().parse().unwrap(), it.next().unwrap().parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 100);
    for (e, want) in [(0, 1e-3), (6, 1e-3), (18, 1e-3), (42, 1e-3), (90, 1e-5)] {
        assert_eq!(rows[e].0, e);
        assert!((rows[e].1 - want).abs() < 1e-12, "epoch {e}: {}", rows[e].1);
    }
}

#[test]
fn user_errors_exit_with_one_and_no_backtrace() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"seed": 1, "bogus": 2}"#).unwrap();
    for args in [
        &["train", "--config", "missing.json"][..],
        &["gen-data", "--config", "bad.json"],
        &["frobnicate"],
        &["eval"],
    ] {
        let o = banet(args, dir.path());
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(!err.contains("panicked") && !err.contains("RUST_BACKTRACE"), "{err}");
    }
    let o = banet(&["gen-data", "--config", "bad.json"], dir.path());
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
    assert_eq!(banet(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn config_validation_rejects_inconsistent_runs() {
    let bad = [
        r#"{"seed": 0, "model": {"history": 12}}"#,
        r#"{"seed": 0, "train": {"seed": 4}}"#,
        r#"{"seed": 0, "scenes": {"count": 0}}"#,
        r#"{"seed": 0, "train": {"stage2_start_epoch": 5}}"#,
        r#"{"scenes": {"count": 2}}"#,
    ];
    for text in bad {
        assert!(
            matches!(RunConfig::parse(text), Err(Error::Config(_) | Error::Parse { .. })),
            "{text}"
        );
    }
    let cfg = RunConfig::parse(r#"{"seed": 5}"#).unwrap();
    assert_eq!(cfg, RunConfig::desk(5));
    assert_ne!(cfg.hash(), RunConfig::desk(6).hash());
    assert_eq!(cfg.hash().len(), 64);
}

#[test]
fn pipeline_records_the_config_hash_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, SMALL).unwrap();
    let cfg = cfg.to_str().unwrap();
    for cmd in ["gen-data", "train", "predict", "eval"] {
        let o = banet(&[cmd, "--config", cfg], dir.path());
        assert_eq!(
            o.status.code(),
            Some(0),
            "{cmd}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        if cmd == "train" {
            let text = stdout(&o);
            assert!(text.lines().nth(5).unwrap().contains("\"S1\""));
            assert!(!text.lines().nth(5).unwrap().contains("traj"));
            assert!(text.lines().nth(6).unwrap().contains("\"traj\""));
        }
    }
    let run = Run::load(Path::new(cfg), None).unwrap();
    let dataset: Dataset = serde_json::from_str(&std::fs::read_to_string(run.dataset_path()).unwrap()).unwrap();
    assert_eq!(dataset.config_hash, run.hash);
    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(run.checkpoint_dir().join("params.json")).unwrap()).unwrap();
    assert_eq!(manifest.config_hash.as_deref(), Some(run.hash.as_str()));
    let preds = PredictionFile::load(&run.predictions).unwrap();
    assert_eq!(preds.config_hash.as_deref(), Some(run.hash.as_str()));
    assert_eq!(preds.predictions.len(), 2);
    let report: EvalOutput = serde_json::from_str(&std::fs::read_to_string(&run.report).unwrap()).unwrap();
    assert_eq!(report.config_hash.as_deref(), Some(run.hash.as_str()));
    assert_eq!(report.metrics.actors, 2);

    // a seed override is part of the hash
    assert_ne!(Run::load(Path::new(cfg), Some(4)).unwrap().hash, run.hash);
}

#[test]
fn single_model_ensemble_keeps_the_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, SMALL).unwrap();
    let run = Run::load(&cfg, None).unwrap();
    let mut sink = Vec::new();
    gen_data(&run, &mut sink).unwrap();
    train_command(&run, &mut sink).unwrap();
    predict_command(&run, &mut sink).unwrap();
    let base = eval_command(&run, None, None, &mut sink).unwrap();

    std::fs::write(
        dir.path().join("ensemble.json"),
        r#"[{"model_id": "only", "alpha": 2.0, "prediction_file": "run/predictions.json"}]"#,
    )
    .unwrap();
    let o = banet(
        &[
            "ensemble",
            "--manifest",
            "ensemble.json",
            "--out",
            "fused.json",
            "--seed",
            "9",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let fused = eval_command(
        &run,
        Some(&dir.path().join("fused.json")),
        Some(&dir.path().join("r.json")),
        &mut sink,
    )
    .unwrap();
    let (a, b) = (base.metrics.values(), fused.metrics.values());
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-9, "{a:?} vs {b:?}");
    }
}

#[test]
fn grad_check_command_reports_every_block() {
    let mut out = Vec::new();
    grad_check_command(1, 2, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert!(text.lines().last().unwrap().starts_with("all "));
    for block in ["actor", "lane", "boundary", "fusion.actor_actor", "decoder.completion"] {
        assert!(text.contains(block), "{block}");
    }
    assert_eq!(exit_code(&Error::Check("x".into())), EXIT_VERIFY);
    assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USER);
}
