use std::path::Path;
use std::process::{Command, Output};

fn curvmatch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_curvmatch"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &[&str] = &[
    "--synthetic",
    "--n",
    "300",
    "--d",
    "6",
    "--epochs",
    "2",
    "--batch-size",
    "32",
];

fn with<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    SMALL.iter().copied().chain(extra.iter().copied()).collect()
}

#[test]
fn gradcheck_passes_and_lists_errors() {
    let out = curvmatch(&["gradcheck"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    for suite in ["first-order", "second-order", "curvature-oracle", "mmd-oracle"] {
        let line = text.lines().find(|l| l.starts_with(suite)).expect(suite);
        assert!(line.contains("PASS") && line.contains("max error"), "{line}");
    }
}

#[test]
fn train_writes_outputs_and_evaluate_reproduces_them() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out_str = out_dir.to_str().unwrap();
    let mut args = vec!["train"];
    args.extend(with(&[
        "--method",
        "cuma",
        "--shift",
        "gaussian",
        "--shift",
        "uniform:0.05",
        "--out",
        out_str,
    ]));
    let out = curvmatch(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["metrics.json", "epochs.jsonl", "model-seed0.json"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let text = stdout(&out);
    assert!(text.contains("gaussian") && text.contains("uniform-0.05"));

    let ckpt = out_dir.join("model-seed0.json");
    let mut args = vec!["evaluate"];
    args.extend(with(&[
        "--shift",
        "gaussian",
        "--shift",
        "uniform:0.05",
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]));
    let eval = curvmatch(&args);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let rows = |s: &str| {
        s.lines()
            .filter(|l| l.starts_with("test ") || l.starts_with("gaussian"))
            .map(String::from)
            .collect::<Vec<_>>()
    };
    assert_eq!(rows(&stdout(&eval)), rows(&text));
}

#[test]
fn config_overrides_flags() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("spec.json");
    std::fs::write(&config, r#"{"train": {"epochs": 1, "method": "normal"}, "repeats": 2}"#).unwrap();
    let out_dir = dir.path().join("run");
    let mut args = vec![
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ];
    args.extend(with(&["--method", "cuma"]));
    let out = curvmatch(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["spec"]["train"]["method"], "normal");
    assert_eq!(metrics["spec"]["train"]["epochs"], 1);
    assert_eq!(metrics["spec"]["train"]["batch_size"], 32);
    assert_eq!(metrics["runs"].as_array().unwrap().len(), 2);
    assert!(stdout(&out).contains('±'));
}

#[test]
fn sweep_emits_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("sweep");
    let mut args = vec![
        "sweep",
        "--alphas",
        "0.1,1,10",
        "--gammas",
        "1",
        "--out",
        out_dir.to_str().unwrap(),
    ];
    args.extend(with(&["--shift", "gaussian"]));
    let out = curvmatch(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let sweep = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 4);
    let pareto = std::fs::read_to_string(out_dir.join("pareto.csv")).unwrap();
    assert!(pareto.lines().count() >= 2);
}

#[test]
fn synth_data_round_trips_through_csv_training() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = curvmatch(&["synth-data", "--n", "300", "--d", "6", "--out", data.to_str().unwrap()]);
    assert!(out.status.success());
    for f in ["train.csv", "test.csv", "schema.json", "generator.json"] {
        assert!(data.join(f).exists(), "{f}");
    }
    let p = |f: &str| data.join(f).to_str().unwrap().to_string();
    let (train, test, schema) = (p("train.csv"), p("test.csv"), p("schema.json"));
    let out = curvmatch(&[
        "train",
        "--train-csv",
        &train,
        "--test-csv",
        &test,
        "--schema",
        &schema,
        "--epochs",
        "1",
        "--extra-test",
        &format!("again={test}"),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("again"));
}

#[test]
fn missing_inputs_and_bad_flags_fail() {
    let out = curvmatch(&[
        "train",
        "--train-csv",
        "/nope/a.csv",
        "--test-csv",
        "/nope/b.csv",
        "--schema",
        "/nope/s.json",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
    assert!(!curvmatch(&["train"]).status.success());
    assert!(!curvmatch(&["train", "--synthetic", "--shift", "laplace"])
        .status
        .success());
    assert!(!curvmatch(&["train", "--train-csv", "x.csv"]).status.success());
    assert!(!Path::new("x.csv").exists());
}
