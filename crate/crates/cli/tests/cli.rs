use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mvgnn::datasets::load_dataset;
use mvgnn::Task;
use mvgnn_cli::output::{AuditSummary, BenchSummary, EvalSummary, GenerateSummary, GradcheckSummary, TrainSummary};
use serde::de::DeserializeOwned;
use serde::Serialize;

fn mvgnn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvgnn"))
        .args(args)
        .current_dir(dir)
        .env_remove("MVGNN_THREADS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// Parses stdout and checks that re-serializing gives the same JSON value.
fn json<T: DeserializeOwned + Serialize>(out: &Output) -> T {
    let text = String::from_utf8_lossy(&out.stdout);
    let value: serde_json::Value = serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("{e}: {text}"));
    let parsed: T = serde_json::from_value(value.clone()).unwrap();
    assert_eq!(serde_json::to_value(&parsed).unwrap(), value);
    parsed
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn generate_writes_three_splits() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["generate", "--task", "nbody", "--train", "100", "--val", "50", "--test", "50", "--seed", "7", "--out", "d", "--json"];
    let out = mvgnn(tmp.path(), &args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary: GenerateSummary = json(&out);
    assert_eq!(summary.files.len(), 3);
    for (file, want) in summary.files.iter().zip([100, 50, 50]) {
        let ds = load_dataset(&tmp.path().join(&file.path)).unwrap();
        assert_eq!(ds.task, Task::Nbody);
        assert_eq!(ds.samples.len(), want);
        assert_eq!(file.samples, want);
    }
    let first = fs::read(tmp.path().join("d/nbody_test.mvds")).unwrap();
    let again = mvgnn(tmp.path(), &["generate", "--train", "100", "--val", "50", "--test", "50", "--seed", "7", "--out", "e", "--threads", "2"]);
    assert_eq!(code(&again), 0);
    assert_eq!(first, fs::read(tmp.path().join("e/nbody_test.mvds")).unwrap());
    let other = mvgnn(tmp.path(), &["generate", "--train", "100", "--val", "50", "--test", "50", "--seed", "8", "--out", "f"]);
    assert_eq!(code(&other), 0);
    assert_ne!(first, fs::read(tmp.path().join("f/nbody_test.mvds")).unwrap());
}

#[test]
fn startup_prints_resolved_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mvgnn(tmp.path(), &["audit-equivariance", "--trials", "2"]);
    let err = stderr(&out);
    for needle in ["\"layers\":4", "\"channels\":16", "\"scalar_width\":64", "\"tol\":1e-8"] {
        assert!(err.contains(needle), "{err}");
    }
}

#[test]
fn fresh_audit_passes_for_every_model() {
    let tmp = tempfile::tempdir().unwrap();
    for model in ["clifford-egnn", "mvn-gnn", "mvp-gnn", "egnn"] {
        for task in ["nbody", "denoise"] {
            let out = mvgnn(tmp.path(), &["audit-equivariance", "--model", model, "--task", task, "--trials", "20", "--json"]);
            assert_eq!(code(&out), 0, "{model} {task}: {}", stderr(&out));
            let s: AuditSummary = json(&out);
            assert!(s.report.passed);
            assert!(s.report.max_rotation_error <= 1e-8 && s.report.max_reflection_error <= 1e-8);
            assert_eq!(s.model, model);
        }
    }
}

#[test]
fn failed_checks_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let audit = mvgnn(tmp.path(), &["audit-equivariance", "--trials", "4", "--tol", "0"]);
    assert_eq!(code(&audit), 2);
    assert!(String::from_utf8_lossy(&audit.stdout).contains("FAIL"));
    let grad = mvgnn(tmp.path(), &["gradcheck", "--model", "egnn", "--probes", "4", "--tol", "0"]);
    assert_eq!(code(&grad), 2);
}

#[test]
fn gradcheck_reports_ops_and_models() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mvgnn(tmp.path(), &["gradcheck", "--probes", "10", "--json"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let s: GradcheckSummary = json(&out);
    assert!(s.passed);
    assert!(s.ops.iter().any(|r| r.name == "geometric_product"));
    assert_eq!(s.models.len(), 4);
    assert!(s.ops.iter().chain(&s.models).all(|r| r.max_rel_error <= 1e-5));
}

#[test]
fn usage_and_contract_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&mvgnn(tmp.path(), &["train", "--bogus"])), 1);
    assert_eq!(code(&mvgnn(tmp.path(), &["bench", "--model", "transformer"])), 1);
    assert_eq!(code(&mvgnn(tmp.path(), &["audit-equivariance", "--threads", "0"])), 1);
    assert_eq!(code(&mvgnn(tmp.path(), &["--help"])), 0);

    let missing = mvgnn(tmp.path(), &["eval", "--checkpoint", "nowhere"]);
    assert_eq!(code(&missing), 1);
    let line = stderr(&missing);
    assert!(line.starts_with("error: trainer::load_run:"), "{line}");
    assert_eq!(line.trim_end().lines().count(), 1);

    fs::write(tmp.path().join("junk.mvds"), b"not a dataset").unwrap();
    let bad = mvgnn(tmp.path(), &["audit-equivariance", "--data", "junk.mvds"]);
    assert_eq!(code(&bad), 1);
    assert!(stderr(&bad).contains("datasets::load"));
}

#[test]
fn train_rejects_data_of_another_task() {
    let tmp = tempfile::tempdir().unwrap();
    let gen = mvgnn(tmp.path(), &["generate", "--task", "denoise", "--train", "2", "--val", "2", "--test", "2", "--out", "d"]);
    assert_eq!(code(&gen), 0, "{}", stderr(&gen));
    for split in ["train", "val", "test"] {
        let d = tmp.path().join("d");
        fs::copy(d.join(format!("denoise_{split}.mvds")), d.join(format!("nbody_{split}.mvds"))).unwrap();
    }
    let out = mvgnn(tmp.path(), &["train", "--task", "nbody", "--data", "d", "--out", "run", "--epochs", "1"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("--task"), "{}", stderr(&out));
    assert!(!tmp.path().join("run").exists());
}

#[test]
fn train_eval_and_audit_a_memorizing_run() {
    let tmp = tempfile::tempdir().unwrap();
    let gen = mvgnn(tmp.path(), &["generate", "--train", "10", "--val", "10", "--test", "10", "--seed", "3", "--out", "d"]);
    assert_eq!(code(&gen), 0);
    let train_args = [
        "train", "--model", "clifford-egnn", "--layers", "2", "--channels", "8", "--scalar-width", "32", "--hidden", "32", "--batch", "10",
        "--epochs", "200", "--seed", "5", "--data", "d", "--json",
    ];
    let run = |out: &str| {
        let mut args = train_args.to_vec();
        args.extend(["--out", out]);
        let o = mvgnn(tmp.path(), &args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        o
    };
    let first: TrainSummary = json(&run("r1"));
    assert_eq!(first.epochs, 200);
    assert!(first.test_mse.is_some());

    let eval = mvgnn(tmp.path(), &["eval", "--checkpoint", "r1", "--data", "d/nbody_train.mvds", "--json"]);
    assert_eq!(code(&eval), 0, "{}", stderr(&eval));
    let e: EvalSummary = json(&eval);
    assert_eq!(e.samples, 10);
    assert!(e.mse <= 0.1 * e.identity_mse, "{e:?}");
    assert!(e.linear_extrapolation_mse.is_some());

    let audit = mvgnn(tmp.path(), &["audit-equivariance", "--checkpoint", "r1", "--data", "d", "--json"]);
    assert_eq!(code(&audit), 0, "{}", stderr(&audit));
    let a: AuditSummary = json(&audit);
    assert!(a.report.max_rotation_error.max(a.report.max_reflection_error) <= 1e-8);
    let conflict = mvgnn(tmp.path(), &["audit-equivariance", "--checkpoint", "r1", "--model", "egnn"]);
    assert_eq!(code(&conflict), 1);

    let second: TrainSummary = json(&run("r2"));
    assert_eq!(first.best_val_mse.to_bits(), second.best_val_mse.to_bits());
    assert_eq!(first.test_mse.map(f64::to_bits), second.test_mse.map(f64::to_bits));
    let ckpt = |d: &str| fs::read(tmp.path().join(d).join("checkpoint.mvgn")).unwrap();
    assert_eq!(ckpt("r1"), ckpt("r2"));
    let metrics = fs::read_to_string(tmp.path().join("r1/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 201);
}

#[test]
fn bench_prints_a_row_per_model() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mvgnn(tmp.path(), &["bench", "--batch", "4", "--iters", "3", "--channels", "4", "--layers", "1", "--json"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let s: BenchSummary = json(&out);
    let names: Vec<_> = s.rows.iter().map(|r| r.model.as_str()).collect();
    assert_eq!(names, ["egnn", "clifford-egnn", "mvn-gnn", "mvp-gnn"]);
    assert!(s.rows.iter().all(|r| r.seconds_per_iteration > 0.0 && r.iterations == 3));

    let text = mvgnn(tmp.path(), &["bench", "--model", "egnn", "--task", "denoise", "--batch", "2", "--iters", "2"]);
    assert_eq!(code(&text), 0, "{}", stderr(&text));
    assert!(String::from_utf8_lossy(&text.stdout).contains("seconds/iteration"));
}
