//! End-to-end tests of the `autodet` binary: exit codes, output files,
//! determinism, and the committed golden evaluation report.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_autodet"))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

#[test]
fn help_exits_zero() {
    let out = run(&["--help"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("search"));
}

#[test]
fn unknown_flag_exits_two() {
    assert_eq!(code(&run(&["scale", "--bogus-flag"])), 2);
}

#[test]
fn unknown_subcommand_exits_two() {
    assert_eq!(code(&run(&["frobnicate"])), 2);
}

#[test]
fn preset_conflicts_with_custom_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "train",
        "--out",
        dir.path().to_str().unwrap(),
        "--paper-scale",
        "--epochs",
        "3",
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("conflict"));
}

#[test]
fn both_presets_conflict() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "train",
        "--out",
        dir.path().to_str().unwrap(),
        "--paper-scale",
        "--desk-scale",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn gen_data_is_deterministic_and_manifested() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    for d in [&d1, &d2] {
        let out = run(&[
            "gen-data",
            "--out",
            d.path().to_str().unwrap(),
            "--count",
            "6",
            "--seed",
            "11",
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = std::fs::read(d1.path().join("gt.jsonl")).unwrap();
    let b = std::fs::read(d2.path().join("gt.jsonl")).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.iter().filter(|&&c| c == b'\n').count(), 6);
    let manifest = std::fs::read_to_string(d1.path().join("manifest.json")).unwrap();
    assert!(manifest.contains("config_hash"));
    assert!(manifest.contains("\"seed\": 11"));
}

#[test]
fn eval_matches_committed_golden_report_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "eval",
        "--out",
        dir.path().to_str().unwrap(),
        "--detections",
        fixture("detections.jsonl").to_str().unwrap(),
        "--gt",
        fixture("gt.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let got = std::fs::read(dir.path().join("report.json")).unwrap();
    let golden = std::fs::read(fixture("golden_report.json")).unwrap();
    assert_eq!(got, golden);
    let got_txt = std::fs::read(dir.path().join("report.txt")).unwrap();
    let golden_txt = std::fs::read(fixture("golden_report.txt")).unwrap();
    assert_eq!(got_txt, golden_txt);
    let svg = std::fs::read_to_string(dir.path().join("pr_curve.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    assert!(svg.contains("<path"));
}

#[test]
fn eval_malformed_detections_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{not json\n").unwrap();
    let out = run(&[
        "eval",
        "--out",
        dir.path().to_str().unwrap(),
        "--detections",
        bad.to_str().unwrap(),
        "--gt",
        fixture("gt.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn eval_missing_file_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "eval",
        "--out",
        dir.path().to_str().unwrap(),
        "--detections",
        "/nonexistent.jsonl",
        "--gt",
        fixture("gt.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn scale_lists_the_whole_family() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["scale", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let txt = std::fs::read_to_string(dir.path().join("scale.txt")).unwrap();
    assert_eq!(txt.lines().count(), 8); // header + D0..D6
    for phi in 0..=6 {
        assert!(txt.contains(&format!("D{phi}")));
    }
}

#[test]
fn count_reports_exact_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "count",
        "--out",
        dir.path().to_str().unwrap(),
        "--phi",
        "1",
    ]);
    assert_eq!(code(&out), 0);
    let json = std::fs::read_to_string(dir.path().join("count.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert!(v["params"].as_u64().unwrap() > 0);
    assert!(v["flops"].as_u64().unwrap() > 0);
}

#[test]
fn count_rejects_out_of_range_phi() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "count",
        "--out",
        dir.path().to_str().unwrap(),
        "--phi",
        "9",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn ablate_unknown_key_exits_two_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "ablate",
        "--out",
        dir.path().to_str().unwrap(),
        "--cell",
        "fpn=plain,flavor=spicy",
    ]);
    assert_eq!(code(&out), 2);
    assert!(!dir.path().join("table.json").exists());
}

#[test]
fn train_then_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "train",
        "--out",
        dir.path().to_str().unwrap(),
        "--width",
        "8",
        "--scenes",
        "4",
        "--val-scenes",
        "2",
        "--epochs",
        "1",
        "--batch",
        "2",
        "--seed",
        "3",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("best.ckpt.json").exists());
    assert!(dir.path().join("train_log.json").exists());
    assert!(dir.path().join("manifest.json").exists());

    let ev = tempfile::tempdir().unwrap();
    let out = run(&[
        "eval",
        "--out",
        ev.path().to_str().unwrap(),
        "--detections",
        dir.path().join("val_detections.jsonl").to_str().unwrap(),
        "--gt",
        dir.path().join("val_gt.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ev.path().join("report.json").exists());
}

#[test]
fn search_emits_loadable_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "search",
        "--out",
        dir.path().to_str().unwrap(),
        "--width",
        "8",
        "--scenes",
        "4",
        "--epochs",
        "2",
        "--arch-start",
        "1",
        "--nodes",
        "4",
        "--seed",
        "5",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let bundle = std::fs::read_to_string(dir.path().join("bundle.json")).unwrap();
    assert!(bundle.contains("op_set_signature"));
    assert!(dir.path().join("search_log.json").exists());
}

#[test]
fn config_file_sets_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "seed = 99\n").unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&[
        "gen-data",
        "--out",
        out_dir.to_str().unwrap(),
        "--count",
        "2",
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let manifest = std::fs::read_to_string(out_dir.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 99"));
}

#[test]
fn config_file_unknown_key_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "sead = 99\n").unwrap();
    let out = run(&[
        "gen-data",
        "--out",
        dir.path().join("out").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
}
