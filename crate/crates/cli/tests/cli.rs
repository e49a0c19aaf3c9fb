//! End-to-end runs of the `palm-lab` binary: outputs, determinism and exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use palm_lab_core::data::MetricsReport;
use palm_lab_core::jacobian::parse_report_csv;
use palm_lab_core::math::stats::spearman;
use palm_lab_core::models::{Vocab, LOSS_LOG_HEADER};
use palm_lab_core::ParallelCorpus;
use tempfile::TempDir;

fn palm_lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_palm-lab")).args(args).output().expect("spawn palm-lab")
}

fn run_ok(args: &[&str]) -> String {
    let out = palm_lab(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    palm_lab(args).status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

const COPY_SPEC: &str = r#"{"kind": "copy", "vocab_size": 16, "source_len_range": [2, 6], "pairs": 512, "seed": 3}"#;

const COPY_CONFIG: &str = r#"{
    "model": {"variant": "LM", "d": 32, "layers": 1, "loss_scope": "target_only", "vocab": {"size": 16}},
    "train": {"epochs": 50, "batch_size": 16, "lr": 0.003},
    "seed": 7
}"#;

#[test]
fn gen_data_writes_requested_pairs_deterministically() {
    let dir = TempDir::new().unwrap();
    let spec = write(dir.path(), "spec.json", r#"{"kind": "copy", "vocab_size": 10, "source_len_range": [1, 5], "pairs": 4, "seed": 9}"#);
    let (a, b) = (dir.path().join("a.txt"), dir.path().join("b.txt"));
    assert_eq!(run_ok(&["gen-data", "--spec", p(&spec), "--out", p(&a)]), "4 pairs\n");
    run_ok(&["gen-data", "--spec", p(&spec), "--out", p(&b)]);
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let corpus = ParallelCorpus::load(&a, Vocab::new(10).unwrap()).unwrap();
    assert_eq!(corpus.len(), 4);
    assert_eq!(corpus.to_text(), text);
    for (s, t) in corpus.pairs() {
        assert_eq!(s, t);
    }
}

#[test]
fn gen_data_rejects_invalid_specs() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("x.txt");
    for (name, spec) in [
        ("unknown.json", r#"{"kind": "copy", "vocab_size": 10, "source_len_range": [1, 5], "pairs": 4, "seed": 9, "x": 1}"#),
        ("range.json", r#"{"kind": "copy", "vocab_size": 10, "source_len_range": [5, 1], "pairs": 4, "seed": 9}"#),
        ("vocab.json", r#"{"kind": "copy", "vocab_size": 3, "source_len_range": [1, 2], "pairs": 4, "seed": 9}"#),
        ("syntax.json", "{"),
    ] {
        let spec = write(dir.path(), name, spec);
        let res = palm_lab(&["gen-data", "--spec", p(&spec), "--out", p(&out)]);
        assert_eq!(res.status.code(), Some(2), "{name}");
        assert!(!res.stderr.is_empty(), "{name}: no message");
    }
    assert_eq!(code(&["gen-data", "--spec", "/nonexistent/spec.json", "--out", p(&out)]), 2);
    assert_eq!(code(&["gen-data", "--spec"]), 2);
    assert_eq!(code(&["no-such-command"]), 2);
}

#[test]
fn train_and_eval_copy_task() {
    let dir = TempDir::new().unwrap();
    let spec = write(dir.path(), "spec.json", COPY_SPEC);
    let config = write(dir.path(), "lm.json", COPY_CONFIG);
    let data = dir.path().join("copy.txt");
    run_ok(&["gen-data", "--spec", p(&spec), "--out", p(&data)]);

    let (ck1, ck2) = (dir.path().join("run1.ckpt"), dir.path().join("run2.ckpt"));
    run_ok(&["train", "--config", p(&config), "--data", p(&data), "--out", p(&ck1)]);
    run_ok(&["train", "--config", p(&config), "--data", p(&data), "--out", p(&ck2)]);
    assert_eq!(std::fs::read(&ck1).unwrap(), std::fs::read(&ck2).unwrap(), "checkpoint bytes differ");
    let log1 = std::fs::read_to_string(dir.path().join("run1.ckpt.loss.csv")).unwrap();
    assert_eq!(log1, std::fs::read_to_string(dir.path().join("run2.ckpt.loss.csv")).unwrap());

    let mut lines = log1.lines();
    assert_eq!(lines.next(), Some(LOSS_LOG_HEADER));
    let totals: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(totals.len(), 50);
    let epochs: Vec<f64> = (1..=totals.len()).map(|e| e as f64).collect();
    assert!(spearman(&epochs, &totals) < -0.9, "loss not trending down: {totals:?}");
    assert!(totals[49] < 0.1 * totals[0]);

    let (m1, m2) = (dir.path().join("m1.json"), dir.path().join("m2.json"));
    let stdout1 = run_ok(&["eval", "--checkpoint", p(&ck1), "--data", p(&data), "--metrics", p(&m1)]);
    let stdout2 = run_ok(&["eval", "--checkpoint", p(&ck1), "--data", p(&data), "--metrics", p(&m2)]);
    assert_eq!(stdout1, stdout2);
    assert_eq!(std::fs::read(&m1).unwrap(), std::fs::read(&m2).unwrap());
    let report: MetricsReport = serde_json::from_str(&std::fs::read_to_string(&m1).unwrap()).unwrap();
    assert!(report.seq_accuracy >= 0.9, "seq_accuracy {}", report.seq_accuracy);
    assert_eq!(report.model, "LM");

    let empty = write(dir.path(), "empty.txt", "");
    assert_eq!(code(&["eval", "--checkpoint", p(&ck1), "--data", p(&empty), "--metrics", p(&m1)]), 2);
    let garbage = write(dir.path(), "garbage.ckpt", "not a checkpoint");
    assert_eq!(code(&["eval", "--checkpoint", p(&garbage), "--data", p(&data), "--metrics", p(&m1)]), 2);
}

#[test]
fn train_exit_codes() {
    let dir = TempDir::new().unwrap();
    let data = write(dir.path(), "d.txt", "3 4\t4 3\n5 6 7\t7 6 5\n");
    let out = dir.path().join("m.ckpt");
    let ok = write(dir.path(), "ok.json", r#"{"model": {"variant": "LM", "d": 8, "layers": 1}, "train": {"epochs": 2}}"#);
    assert_eq!(code(&["train", "--config", p(&ok), "--data", "/nonexistent/data.txt", "--out", p(&out)]), 2);
    assert_eq!(code(&["train", "--config", "/nonexistent/c.json", "--data", p(&data), "--out", p(&out)]), 2);
    let unknown = write(dir.path(), "unknown.json", r#"{"model": {"variant": "LM", "d": 8}, "optimizer": {}}"#);
    assert_eq!(code(&["train", "--config", p(&unknown), "--data", p(&data), "--out", p(&out)]), 2);
    let small_vocab = write(dir.path(), "small.json", r#"{"model": {"variant": "LM", "d": 8, "vocab": {"size": 5}}}"#);
    assert_eq!(code(&["train", "--config", p(&small_vocab), "--data", p(&data), "--out", p(&out)]), 2);

    let blowup = write(
        dir.path(),
        "nan.json",
        r#"{"model": {"variant": "LM", "d": 8, "layers": 1, "dropout": 0.0}, "train": {"epochs": 5, "lr": 1e300}}"#,
    );
    let res = palm_lab(&["train", "--config", p(&blowup), "--data", p(&data), "--out", p(&out)]);
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(String::from_utf8_lossy(&res.stderr).contains("diverged"));

    // Vocabulary inferred from the data when neither model.vocab nor task is set.
    let stdout = run_ok(&["train", "--config", p(&ok), "--data", p(&data), "--out", p(&out)]);
    assert!(stdout.contains("on 2 pairs for 2 epochs"));
}

#[test]
fn jacobian_verify_reports_worst_case() {
    let out = run_ok(&["jacobian-verify"]);
    assert!(out.contains("trials 200"));
    assert!(out.contains("worst case: mode "));
    assert!(out.contains(" seed "));
    assert!(out.trim_end().ends_with("PASS"));
    assert_eq!(out, run_ok(&["jacobian-verify"]));
    assert_eq!(run_ok(&["jacobian-verify", "--trials", "5", "--dims", "d=3,n=2,i=2"]).lines().next(), Some("trials 5 dims d=3,n=2,i=2"));
    assert_eq!(code(&["jacobian-verify", "--trials", "0"]), 2);
    assert_eq!(code(&["jacobian-verify", "--dims", "d=0"]), 2);
    assert_eq!(code(&["jacobian-verify", "--dims", "q=3"]), 2);
}

#[test]
fn sensitivity_csv_shape_trend_and_determinism() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    let args = |out: &Path| ["sensitivity", "--mode", "cross", "--N", "8", "--imax", "32", "--seeds", "16", "--out", p(out)].map(String::from);
    let a_args = args(&a);
    let b_args = args(&b);
    run_ok(&a_args.iter().map(String::as_str).collect::<Vec<_>>());
    run_ok(&b_args.iter().map(String::as_str).collect::<Vec<_>>());
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    let rows = parse_report_csv(&text).unwrap();
    assert_eq!(rows.len(), 32);
    let steps: Vec<f64> = rows.iter().map(|r| r.step as f64).collect();
    let means: Vec<f64> = rows.iter().map(|r| r.mean_sensitivity).collect();
    assert!(spearman(&steps, &means) <= -0.8);

    let out = dir.path().join("x.csv");
    assert_eq!(code(&["sensitivity", "--mode", "sideways", "--N", "8", "--imax", "4", "--seeds", "2", "--out", p(&out)]), 2);
    assert_eq!(code(&["sensitivity", "--mode", "cross", "--N", "0", "--imax", "4", "--seeds", "2", "--out", p(&out)]), 2);
    assert_eq!(code(&["sensitivity", "--mode", "cross", "--N", "8", "--imax", "4", "--seeds", "3..3", "--out", p(&out)]), 2);
    run_ok(&["sensitivity", "--mode", "palm", "--N", "4", "--imax", "3", "--seeds", "1,5", "--out", p(&out)]);
    assert_eq!(parse_report_csv(&std::fs::read_to_string(&out).unwrap()).unwrap().len(), 3);
}

fn small_compare_setup(dir: &Path) -> (PathBuf, PathBuf) {
    let spec = write(dir, "spec.json", r#"{"kind": "reverse", "vocab_size": 12, "source_len_range": [2, 4], "pairs": 40, "seed": 5}"#);
    let data = dir.join("data.txt");
    run_ok(&["gen-data", "--spec", p(&spec), "--out", p(&data)]);
    let configs = dir.join("configs");
    std::fs::create_dir(&configs).unwrap();
    for variant in ["PALM", "LM", "LM_PA", "ED"] {
        let cfg = format!(
            r#"{{"model": {{"variant": "{variant}", "d": 8, "layers": 1, "vocab": {{"size": 12}}}},
                "train": {{"epochs": 2, "batch_size": 8}}, "seed": 4, "eval": {{"split": 0.25}}}}"#
        );
        write(&configs, &format!("{}.json", variant.to_lowercase()), &cfg);
    }
    (configs, data)
}

#[test]
fn compare_reports_every_config_deterministically() {
    let dir = TempDir::new().unwrap();
    let (configs, data) = small_compare_setup(dir.path());
    let (a, b, c) = (dir.path().join("a.json"), dir.path().join("b.json"), dir.path().join("c.json"));
    let stdout = run_ok(&["compare", "--configs", p(&configs), "--data", p(&data), "--out", p(&a)]);
    assert!(stdout.contains("parameter order LM < LM_PA < ED: holds"));
    run_ok(&["compare", "--configs", p(&configs), "--data", p(&data), "--out", p(&b)]);
    let serial = Command::new(env!("CARGO_BIN_EXE_palm-lab"))
        .args(["compare", "--configs", p(&configs), "--data", p(&data), "--out", p(&c)])
        .env("PALM_LAB_THREADS", "1")
        .output()
        .unwrap();
    assert!(serial.status.success());
    let report = std::fs::read(&a).unwrap();
    assert_eq!(report, std::fs::read(&b).unwrap());
    assert_eq!(report, std::fs::read(&c).unwrap(), "thread cap changed the report");

    let json: serde_json::Value = serde_json::from_slice(&report).unwrap();
    let names: Vec<&str> = json["models"].as_array().unwrap().iter().map(|m| m["config"].as_str().unwrap()).collect();
    assert_eq!(names, ["ed.json", "lm.json", "lm_pa.json", "palm.json"]);
    assert_eq!(json["train_pairs"], 30);
    assert_eq!(json["eval_pairs"], 10);
    assert_eq!(json["parameter_order_holds"], true);
    let counts = &json["parameter_counts"];
    assert!(counts["LM"].as_u64() < counts["LM_PA"].as_u64() && counts["LM_PA"].as_u64() < counts["ED"].as_u64());
    let dl = json["lengths"]["delta_l"].as_f64().unwrap();
    let avg = &json["lengths"]["avg_len"];
    assert!((dl - (avg["PALM"].as_f64().unwrap() - avg["LM"].as_f64().unwrap())).abs() < 1e-12);
    assert_eq!(json["delta_l_vs_lm"]["LM"], 0.0);
}

#[test]
fn compare_input_errors() {
    let dir = TempDir::new().unwrap();
    let (configs, data) = small_compare_setup(dir.path());
    let out = dir.path().join("r.json");
    let bad_threads = Command::new(env!("CARGO_BIN_EXE_palm-lab"))
        .args(["compare", "--configs", p(&configs), "--data", p(&data), "--out", p(&out)])
        .env("PALM_LAB_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(bad_threads.status.code(), Some(2));
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_eq!(code(&["compare", "--configs", p(&empty), "--data", p(&data), "--out", p(&out)]), 2);
    write(&configs, "zz.json", r#"{"model": {"variant": "LM", "d": 8, "vocab": {"size": 12}}, "eval": {"split": 0.5}}"#);
    assert_eq!(code(&["compare", "--configs", p(&configs), "--data", p(&data), "--out", p(&out)]), 2);
}

#[test]
fn compare_writes_artifacts_to_output_dir() {
    let dir = TempDir::new().unwrap();
    let (configs, data) = small_compare_setup(dir.path());
    for entry in std::fs::read_dir(&configs).unwrap() {
        let path = entry.unwrap().path();
        if path.file_name().unwrap() != "lm.json" {
            std::fs::remove_file(path).unwrap();
        }
    }
    write(
        &configs,
        "lm.json",
        r#"{"model": {"variant": "LM", "d": 8, "layers": 1, "vocab": {"size": 12}}, "train": {"epochs": 1}, "output_dir": "runs"}"#,
    );
    run_ok(&["compare", "--configs", p(&configs), "--data", p(&data), "--out", p(&dir.path().join("r.json"))]);
    for file in ["LM.ckpt", "LM.ckpt.loss.csv", "LM.metrics.json", "LM.outputs.txt"] {
        assert!(configs.join("runs").join(file).is_file(), "{file}");
    }
}
