use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ndarray::Array2;
use packed_he::cnn::{read_predictions, save_weights_csv, write_idx_images, ModelWeights};
use tempfile::TempDir;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_packed-he")).args(args).output().expect("binary runs")
}

fn text(out: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn fixture(images: usize) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let imgs: Vec<Array2<u8>> = (0..images)
        .map(|i| Array2::from_shape_fn((28, 28), |(r, c)| ((r * 13 + c * 7 + i * 31) % 256) as u8))
        .collect();
    write_idx_images(&dir.path().join("images.idx"), &imgs).unwrap();
    save_weights_csv(&ModelWeights::random_mnist(5), &dir.path().join("weights")).unwrap();
    dir
}

#[test]
fn full_round_trip_with_verification() {
    let dir = fixture(35);
    let d = dir.path();
    let out = bin(&["owner-encode", "--images", p(&d.join("images.idx")), "--out", p(&d.join("batches")), "--verify"]);
    assert!(out.status.success(), "{}", text(&out));
    assert!(d.join("batches/batch_00001.SIMULATED.ct").is_file());

    let out = bin(&["provider-encode", "--weights", p(&d.join("weights")), "--out", p(&d.join("model")), "--verify"]);
    assert!(out.status.success(), "{}", text(&out));
    assert!(text(&out).contains("53 ciphertexts"), "{}", text(&out));

    let preds = d.join("preds.jsonl");
    let report = d.join("report.json");
    let out = bin(&[
        "cloud-infer",
        "--batches",
        p(&d.join("batches")),
        "--model",
        p(&d.join("model")),
        "--out",
        p(&preds),
        "--weights",
        p(&d.join("weights")),
        "--verify",
        "--report",
        p(&report),
        "--parallel",
        "2",
    ]);
    assert!(out.status.success(), "{}", text(&out));
    let preds = read_predictions(&preds).unwrap();
    assert_eq!(preds.len(), 35);
    assert!(preds.iter().enumerate().all(|(i, pr)| pr.index == i && pr.scores.len() == 10 && pr.label < 10));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(report["pipeline_depth"], 14);
    assert_eq!(report["images"], 35);
}

#[test]
fn verification_mismatch_exits_with_two() {
    let dir = fixture(3);
    let d = dir.path();
    assert!(bin(&["owner-encode", "--images", p(&d.join("images.idx")), "--out", p(&d.join("b"))]).status.success());
    assert!(bin(&["provider-encode", "--weights", p(&d.join("weights")), "--out", p(&d.join("m"))]).status.success());
    save_weights_csv(&ModelWeights::random_mnist(6), &d.join("other")).unwrap();
    let out = bin(&[
        "cloud-infer",
        "--batches",
        p(&d.join("b")),
        "--model",
        p(&d.join("m")),
        "--out",
        p(&d.join("x.jsonl")),
        "--weights",
        p(&d.join("other")),
        "--verify",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", text(&out));
}

#[test]
fn validation_errors_exit_with_one_and_name_the_file() {
    let dir = fixture(2);
    let d = dir.path();

    fs::remove_file(d.join("weights/fc2_bias.csv")).unwrap();
    let out = bin(&["provider-encode", "--weights", p(&d.join("weights")), "--out", p(&d.join("m"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out).contains("fc2_bias.csv"), "{}", text(&out));

    write_idx_images(&d.join("empty.idx"), &[]).unwrap();
    let out = bin(&["owner-encode", "--images", p(&d.join("empty.idx")), "--out", p(&d.join("e"))]);
    assert_eq!(out.status.code(), Some(1), "{}", text(&out));

    fs::write(d.join("bad.idx"), [0u8, 0, 8, 3, 0, 0]).unwrap();
    let out = bin(&["owner-encode", "--images", p(&d.join("bad.idx")), "--out", p(&d.join("e"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out).contains("bad.idx"), "{}", text(&out));

    let out = bin(&["bench", "--slots", "1000"]);
    assert_eq!(out.status.code(), Some(1), "{}", text(&out));

    let out = bin(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn slot_mismatch_is_rejected_before_inference() {
    let dir = fixture(2);
    let d = dir.path();
    assert!(bin(&["owner-encode", "--images", p(&d.join("images.idx")), "--out", p(&d.join("b"))]).status.success());
    assert!(bin(&["provider-encode", "--weights", p(&d.join("weights")), "--out", p(&d.join("m"))]).status.success());
    let out = bin(&[
        "cloud-infer",
        "--slots",
        "16384",
        "--batches",
        p(&d.join("b")),
        "--model",
        p(&d.join("m")),
        "--out",
        p(&d.join("x.jsonl")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out).contains("32768"), "{}", text(&out));
}

#[test]
fn config_file_sets_the_slot_count() {
    let dir = fixture(20);
    let d = dir.path();
    fs::write(d.join("engine.toml"), "slots = 16384\n").unwrap();
    let report = d.join("plan.json");
    let out = bin(&[
        "owner-encode",
        "--config",
        p(&d.join("engine.toml")),
        "--images",
        p(&d.join("images.idx")),
        "--out",
        p(&d.join("b")),
        "--report",
        p(&report),
    ]);
    assert!(out.status.success(), "{}", text(&out));
    let plan: serde_json::Value = serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(plan["images_per_ct"], 16);
    assert_eq!(plan["batches"], 2);
}

#[test]
fn bench_and_verify_succeed() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("bench.json");
    let out = bin(&["bench", "--report", p(&report)]);
    assert!(out.status.success(), "{}", text(&out));
    assert!(text(&out).contains("within the documented costs"));
    let rows: serde_json::Value = serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap();
    assert!(rows["rows"].as_array().unwrap().len() > 20);

    let out = bin(&["verify", "--cases", "5"]);
    assert!(out.status.success(), "{}", text(&out));
    assert_eq!(text(&out).matches("PASS").count(), 3);
}
