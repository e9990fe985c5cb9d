use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn distcal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_distcal")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = distcal(args);
    assert!(
        out.status.success(),
        "{args:?} exited with {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const QUICK_TRAIN: [&str; 10] = ["--inducing", "4", "--batch", "32", "--mc-samples", "4", "--steps", "40", "--lr", "0.01"];

#[test]
fn subcommands_chain_into_a_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("synth.csv");
    let preds = dir.path().join("preds");
    let model = dir.path().join("gp.json");
    let trace = dir.path().join("trace.csv");
    let maps = dir.path().join("maps.csv");

    ok(&["synth", "--n", "120", "--seed", "3", "--out", p(&data)]);
    assert_eq!(fs::read_to_string(&data).unwrap().lines().count(), 121);

    ok(&["fit-base", "--data", p(&data), "--model", "bayes-ridge", "--seed", "3", "--out-dir", p(&preds)]);
    let train = preds.join("train_predictions.csv");
    let test = preds.join("test_predictions.csv");
    assert_eq!(fs::read_to_string(&train).unwrap().lines().count(), 91);
    assert_eq!(fs::read_to_string(&test).unwrap().lines().count(), 31);

    let mut args = vec!["calibrate", "--preds", p(&train), "--method", "gp-beta", "--out", p(&model), "--trace", p(&trace)];
    args.extend(QUICK_TRAIN);
    ok(&args);
    assert_eq!(fs::read_to_string(&trace).unwrap().lines().count(), 41);

    let report: serde_json::Value =
        serde_json::from_str(&ok(&["evaluate", "--preds", p(&test), "--model", p(&model), "--grid-size", "512", "--mc", "8"]))
            .unwrap();
    for key in ["nll", "mse", "pbl", "max_coverage_error", "coverage_0.05", "coverage_0.95"] {
        assert!(report[key].is_f64(), "missing {key} in {report}");
    }
    let base: serde_json::Value = serde_json::from_str(&ok(&["evaluate", "--preds", p(&test), "--grid-size", "512"])).unwrap();
    assert!(base["nll"].is_f64());

    ok(&["export-maps", "--model", p(&model), "--preds", p(&test), "--out", p(&maps), "--q-points", "9", "--mc", "8"]);
    let table = fs::read_to_string(&maps).unwrap();
    let header: Vec<&str> = table.lines().next().unwrap().split(',').collect();
    assert_eq!(header.len(), 31);
    assert_eq!(header[0], "q");
    assert_eq!(table.lines().count(), 10);
}

#[test]
fn run_prints_reports_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let mut args = vec![
        "run",
        "--seed",
        "4",
        "--n",
        "120",
        "--calibrators",
        "none,iso,gp-beta",
        "--grid-size",
        "512",
        "--predict-samples",
        "8",
        "--map-samples",
        "8",
        "--out-dir",
        p(&out_dir),
    ];
    args.extend(QUICK_TRAIN);
    let report: serde_json::Value = serde_json::from_str(&ok(&args)).unwrap();
    for method in ["base", "none", "iso", "gp-beta"] {
        assert!(report[method]["nll"].is_f64(), "missing {method} in {report}");
    }
    assert_eq!(report["none"], report["base"]);
    for file in ["config.json", "report.json", "trace.csv", "model_gp-beta.json", "model_iso.json"] {
        assert!(out_dir.join(file).is_file(), "missing {file}");
    }
    let written: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(written, report);
}

#[test]
fn run_accepts_a_json_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"source": {"kind": "synthetic", "n": 80}, "calibrators": ["iso"], "grid_size": 256}"#,
    )
    .unwrap();
    let report: serde_json::Value = serde_json::from_str(&ok(&["run", "--seed", "1", "--config", p(&cfg)])).unwrap();
    assert!(report["iso"]["nll"].is_f64());
    assert!(report.get("gp-beta").is_none());
}

#[test]
fn exit_codes_separate_validation_from_numerical_failures() {
    let dir = tempfile::tempdir().unwrap();

    assert_eq!(distcal(&["run", "--n", "50"]).status.code(), Some(1), "missing --seed");
    assert_eq!(distcal(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(distcal(&["--help"]).status.code(), Some(0));

    let missing = dir.path().join("absent.csv");
    assert_eq!(distcal(&["evaluate", "--preds", p(&missing)]).status.code(), Some(1));

    let bad_var = dir.path().join("bad.csv");
    fs::write(&bad_var, "mu,var,y\n0,1,0\n0,-1,0\n").unwrap();
    let out = distcal(&["evaluate", "--preds", p(&bad_var)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));

    assert_eq!(distcal(&["run", "--seed", "0", "--source", "csv"]).status.code(), Some(1), "csv source without --data");

    let constant = dir.path().join("constant.csv");
    let rows: String = (0..40).map(|i| format!("1.0,{i}.5\n")).collect();
    fs::write(&constant, format!("x,y\n{rows}")).unwrap();
    let out = distcal(&["fit-base", "--data", p(&constant), "--out-dir", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
