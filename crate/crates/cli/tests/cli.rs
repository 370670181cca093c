//! End-to-end tests of the `owq` binary.

use std::path::Path;
use std::process::{Command, Output};

use owq_core::{EntryData, TensorArchive};

fn owq(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_owq"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn gen_fixture(dir: &Path, extra: &[&str]) {
    let mut args = vec![
        "gen",
        "--topology",
        "mlp",
        "--dim",
        "32",
        "--samples",
        "256",
        "--outliers",
        "3:60",
        "--seed",
        "7",
        "--out",
        "model.owqt",
        "--calib-out",
        "calib.owqt",
    ];
    args.extend_from_slice(extra);
    let out = owq(dir, &args);
    assert!(out.status.success(), "gen failed: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn quantize_eval_inspect_walkthrough() {
    let dir = tempfile::tempdir().unwrap();
    gen_fixture(dir.path(), &[]);

    // 0.6 extra bits buys one fp16 column per 32-wide layer.
    let out = owq(
        dir.path(),
        &[
            "quantize", "--in", "model.owqt", "--calib", "calib.owqt", "--out", "q.owqt",
            "--bits", "3", "--extra-bits", "0.6",
        ],
    );
    assert!(out.status.success(), "quantize failed: {}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("q.owqt").exists());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("q.report.json")).unwrap())
            .unwrap();
    assert_eq!(report["layers"].as_array().unwrap().len(), 2);
    assert!(report["realized_avg_bits"].as_f64().unwrap() <= 3.6 + 1e-9);

    // The first layer's selection must include the injected outlier channel.
    let archive = TensorArchive::load(dir.path().join("q.owqt")).unwrap();
    let weak = match &archive.get("layer.0.fc0.weak_idx").unwrap().data {
        EntryData::U16(v) => v.clone(),
        _ => panic!("weak_idx dtype"),
    };
    assert!(weak.contains(&3), "outlier channel not selected: {weak:?}");

    let eval = owq(
        dir.path(),
        &["eval", "--in", "model.owqt", "--quantized", "q.owqt", "--calib", "calib.owqt"],
    );
    assert!(eval.status.success());
    let text = String::from_utf8_lossy(&eval.stdout);
    assert!(text.contains("end_to_end_error"), "eval output: {text}");

    // Inspect's printed selection must match the stored weak indices.
    let inspect = owq(dir.path(), &["inspect", "--in", "q.owqt"]);
    assert!(inspect.status.success());
    let text = String::from_utf8_lossy(&inspect.stdout);
    let expect = format!(
        "layer.0.fc0: k={} selected=[{}]",
        weak.len(),
        weak.iter().map(u16::to_string).collect::<Vec<_>>().join(", ")
    );
    assert!(text.contains(&expect), "inspect output mismatch:\n{text}\nwanted {expect}");
    assert!(!text.contains("differs from stored sensitivity top-k"), "{text}");

    let csv = owq(dir.path(), &["inspect", "--in", "q.owqt", "--csv"]);
    let csv_text = String::from_utf8_lossy(&csv.stdout);
    assert!(csv_text.starts_with("layer,column,lambda,delta_norm,sensitivity,selected\n"));
    assert_eq!(csv_text.lines().count(), 1 + 2 * 32);

    let one = owq(dir.path(), &["inspect", "--in", "q.owqt", "--layer", "layer.1.fc1"]);
    let one_text = String::from_utf8_lossy(&one.stdout);
    assert!(one_text.contains("layer.1.fc1") && !one_text.contains("layer.0.fc0"));

    let bench = owq(
        dir.path(),
        &[
            "eval", "--in", "model.owqt", "--quantized", "q.owqt", "--calib", "calib.owqt",
            "--bench",
        ],
    );
    assert!(bench.status.success());
    assert!(String::from_utf8_lossy(&bench.stdout).contains("bench layer.0.fc0"));
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = owq(
        dir.path(),
        &[
            "quantize", "--in", "model.owqt", "--calib", "calib.owqt", "--out", "q.owqt",
            "--bits", "9",
        ],
    );
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn runtime_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = owq(
        dir.path(),
        &[
            "quantize", "--in", "missing.owqt", "--calib", "missing.owqt", "--out", "q.owqt",
            "--bits", "3",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn starved_budget_warns() {
    let dir = tempfile::tempdir().unwrap();
    gen_fixture(dir.path(), &[]);
    let out = owq(
        dir.path(),
        &[
            "quantize", "--in", "model.owqt", "--calib", "calib.owqt", "--out", "q.owqt",
            "--bits", "3", "--extra-bits", "0.01",
        ],
    );
    assert!(out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("budget yields k=0 for layer(s)"), "stderr: {stderr}");
}

#[test]
fn sweep_is_deterministic_and_parallelizable() {
    let dir = tempfile::tempdir().unwrap();
    gen_fixture(dir.path(), &[]);
    let args = [
        "sweep", "--in", "model.owqt", "--calib", "calib.owqt", "--bits", "3", "--budgets",
        "0,0.01,0.6",
    ];
    let seq = owq(dir.path(), &args);
    assert!(seq.status.success(), "{}", String::from_utf8_lossy(&seq.stderr));
    let seq_text = String::from_utf8_lossy(&seq.stdout).to_string();
    assert_eq!(seq_text.lines().count(), 4);
    assert!(seq_text.starts_with("effective_bits,end_to_end_error,total_bytes\n"));

    let mut par_args = args.to_vec();
    par_args.extend_from_slice(&["--jobs", "3", "--out", "table.csv"]);
    let par = owq(dir.path(), &par_args);
    assert!(par.status.success());
    assert_eq!(String::from_utf8_lossy(&par.stdout), seq_text);
    assert_eq!(std::fs::read_to_string(dir.path().join("table.csv")).unwrap(), seq_text);

    // Effective bits never decrease with the budget.
    let bits: Vec<f64> = seq_text
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert!(bits.windows(2).all(|p| p[1] >= p[0]), "{bits:?}");
}

#[test]
fn quantize_is_deterministic_for_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    gen_fixture(dir.path(), &[]);
    for out in ["a.owqt", "b.owqt"] {
        let run = owq(
            dir.path(),
            &[
                "quantize", "--in", "model.owqt", "--calib", "calib.owqt", "--out", out,
                "--bits", "3", "--extra-bits", "0.6", "--seed", "11",
            ],
        );
        assert!(run.status.success());
    }
    let a = std::fs::read(dir.path().join("a.owqt")).unwrap();
    let b = std::fs::read(dir.path().join("b.owqt")).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        std::fs::read_to_string(dir.path().join("a.report.json")).unwrap(),
        std::fs::read_to_string(dir.path().join("b.report.json")).unwrap()
    );
}

#[test]
fn config_file_merges_under_flags() {
    let dir = tempfile::tempdir().unwrap();
    gen_fixture(dir.path(), &[]);
    std::fs::write(
        dir.path().join("cfg.json"),
        r#"{"bits": 4, "extra_bits": 0.6, "act_order": true}"#,
    )
    .unwrap();
    // Flag overrides the file's bits; extra_bits and act_order come from it.
    let out = owq(
        dir.path(),
        &[
            "quantize", "--in", "model.owqt", "--calib", "calib.owqt", "--out", "q.owqt",
            "--config", "cfg.json", "--bits", "3",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let archive = TensorArchive::load(dir.path().join("q.owqt")).unwrap();
    assert_eq!(archive.meta("bits"), Some("3"));
    let cfg: serde_json::Value =
        serde_json::from_str(archive.meta("config").unwrap()).unwrap();
    assert_eq!(cfg["extra_bits"].as_f64().unwrap(), 0.6);
    assert!(cfg["act_order"].as_bool().unwrap());
    assert_eq!(cfg["bits"].as_u64().unwrap(), 3);
}

#[test]
fn block_topology_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out = owq(
        dir.path(),
        &[
            "gen", "--topology", "block", "--dim", "16", "--samples", "128", "--outliers",
            "2:40", "--seed", "3", "--out", "block.owqt", "--calib-out", "bcal.owqt",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let q = owq(
        dir.path(),
        &[
            "quantize", "--in", "block.owqt", "--calib", "bcal.owqt", "--out", "bq.owqt",
            "--bits", "4", "--true-sequential", "--mode", "storage",
        ],
    );
    assert!(q.status.success(), "{}", String::from_utf8_lossy(&q.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("bq.report.json")).unwrap())
            .unwrap();
    assert_eq!(report["topology"], "block");
    assert_eq!(report["true_sequential"], true);
    assert_eq!(report["layers"].as_array().unwrap().len(), 6);
}
