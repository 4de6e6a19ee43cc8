use std::path::Path;
use std::process::{Command, Output};

use slotaug::config::PipelineConfig;
use slotaug::metrics::EvalReport;

fn slotaug(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slotaug"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

const FAST: &[&str] = &[
    "--set", "lda.iterations=30",
    "--set", "lda.num_topics=4",
    "--set", "pretrain.model.d_model=16",
    "--set", "pretrain.model.n_heads=2",
    "--set", "pretrain.train.epochs=1",
    "--set", "filter.epochs=3",
    "--set", "tagger.epochs=4",
];

fn fixture(dir: &Path) -> String {
    let out = slotaug(&[
        "fixture",
        "--dir",
        dir.to_str().unwrap(),
        "--corpus-size",
        "120",
        "--train-size",
        "40",
        "--test-size",
        "40",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap().trim().to_string()
}

fn with_fast<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(FAST.iter().copied()).collect()
}

#[test]
fn default_config_is_loadable_and_annotated() {
    let out = slotaug(&["emit-default-config"]);
    assert!(out.status.success());
    let cfg = PipelineConfig::from_json(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(cfg.augment.transform_prob, 0.3);
    assert_eq!(cfg.tagger.dropout, 0.2);
    assert_eq!(cfg.lda.num_topics, 20);
    assert!(cfg.notes.contains_key("augment.transform_prob"));
}

#[test]
fn missing_upstream_fails_with_stage_tag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path());
    let out = slotaug(&["augment", "--config", &cfg]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stage augment"), "{err}");
}

#[test]
fn invalid_override_is_rejected() {
    let out = slotaug(&["pretrain", "--transform-prob", "1.5"]);
    assert!(!out.status.success());
}

#[test]
fn pipeline_then_self_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path());
    let out = slotaug(&with_fast(&["pipeline", "--config", &cfg]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("baseline") && stdout.contains("mixed"));

    let runs = dir.path().join("runs");
    for stage in ["pretrain", "augment", "filter", "train", "perturb", "evaluate"] {
        assert!(runs.join(stage).join("manifest.json").is_file(), "{stage}");
    }

    // Evaluating the baseline against itself yields zero recovery everywhere.
    std::fs::copy(
        runs.join("train/baseline.json"),
        runs.join("train/augmented.json"),
    )
    .unwrap();
    let out = slotaug(&with_fast(&["evaluate", "--config", &cfg]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(runs.join("evaluate/report.json")).unwrap();
    let report: EvalReport = serde_json::from_str(&text).unwrap();
    assert_eq!(report.clean_f1, report.baseline_clean_f1);
    for row in &report.rows {
        assert_eq!(row.f1, row.baseline_f1);
        if let Some(r) = row.recovery_rate {
            assert_eq!(r, 0.0);
        }
    }
}

#[test]
fn output_dir_flag_is_relative_to_cwd() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path());
    let elsewhere = tempfile::tempdir().unwrap();
    let target = elsewhere.path().join("out");
    let out = slotaug(&with_fast(&[
        "pretrain",
        "--config",
        &cfg,
        "--output-dir",
        target.to_str().unwrap(),
    ]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(target.join("pretrain/rwm.json").is_file());
}
