mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::{small_config, small_plan};
use pm_edit::cli_report::{parse_metrics_csv, CSV_HEADER};
use pm_edit::editors::Algorithm;
use pm_edit::harness::{ExperimentPlan, Strategy};

fn pm_edit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pm-edit"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn write_plan(dir: &Path, plan: &ExperimentPlan) -> PathBuf {
    let path = dir.join("plan-in.json");
    fs::write(&path, serde_json::to_string_pretty(plan).unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn model_facts_edit_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let plan = small_plan(Algorithm::Memit, Strategy::Batched, 8, 8, 1);
    let plan_path = write_plan(dir.path(), &plan);
    let cfg_path = dir.path().join("model-config.json");
    fs::write(&cfg_path, serde_json::to_string(&plan.model_config).unwrap()).unwrap();
    let model = dir.path().join("model.json");
    let facts = dir.path().join("facts.json");
    let out = dir.path().join("run");

    assert_eq!(pm_edit(&["gen-model", "--config", s(&cfg_path), "--out", s(&model)]).status.code(), Some(0));
    assert_eq!(
        pm_edit(&["gen-facts", "--model", s(&model), "--config", s(&plan_path), "--out", s(&facts)]).status.code(),
        Some(0)
    );
    let res = pm_edit(&[
        "edit", "--config", s(&plan_path), "--out", s(&out), "--model", s(&model), "--facts", s(&facts),
    ]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));

    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some(CSV_HEADER));
    assert_eq!(parse_metrics_csv(&csv).unwrap().len(), 1);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest["finished"].is_string());
    assert_eq!(manifest["command"], "edit");
    let saved: ExperimentPlan = serde_json::from_str(&fs::read_to_string(out.join("plan.json")).unwrap()).unwrap();
    assert_eq!(saved, plan);

    // The saved model and facts are the ones the plan would generate itself.
    let fresh = dir.path().join("fresh");
    assert_eq!(pm_edit(&["edit", "--config", s(&plan_path), "--out", s(&fresh)]).status.code(), Some(0));
    assert_eq!(fs::read(fresh.join("metrics.csv")).unwrap(), csv.into_bytes());
}

#[test]
fn unknown_subcommand_is_usage_error() {
    assert_eq!(pm_edit(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(pm_edit(&[]).status.code(), Some(1));
    assert_eq!(pm_edit(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_config_is_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let res = pm_edit(&["edit", "--config", s(&dir.path().join("nope.json")), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn oversized_emmet_batch_exits_numerical() {
    let dir = tempfile::tempdir().unwrap();
    let mut plan = small_plan(Algorithm::Emmet, Strategy::Batched, 48, 48, 2);
    plan.model_config = small_config(2, 8, 16, 2);
    let plan_path = write_plan(dir.path(), &plan);
    let res = pm_edit(&["edit", "--config", s(&plan_path), "--out", s(&dir.path().join("run"))]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("SingularGram"));
}

#[test]
fn sequential_rows_track_edit_budget() {
    let dir = tempfile::tempdir().unwrap();
    let plan = small_plan(Algorithm::Emmet, Strategy::SequentialBatched, 4, 16, 3);
    let plan_path = write_plan(dir.path(), &plan);
    let out = dir.path().join("run");
    assert_eq!(pm_edit(&["edit", "--config", s(&plan_path), "--out", s(&out)]).status.code(), Some(0));
    let rows = parse_metrics_csv(&fs::read_to_string(out.join("metrics.csv")).unwrap()).unwrap();
    let edits: Vec<usize> = rows.iter().map(|r| r.edits_so_far).collect();
    assert_eq!(edits, vec![4, 8, 12, 16]);
    let indices: Vec<usize> = rows.iter().map(|r| r.batch_index).collect();
    assert_eq!(indices, vec![1, 2, 3, 4]);
}

#[test]
fn rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let plan = small_plan(Algorithm::Rome, Strategy::Singular, 1, 6, 4);
    let plan_path = write_plan(dir.path(), &plan);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(pm_edit(&["edit", "--config", s(&plan_path), "--out", s(&a)]).status.code(), Some(0));
    assert_eq!(pm_edit(&["edit", "--config", s(&plan_path), "--out", s(&b)]).status.code(), Some(0));
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
}

#[test]
fn sweeps_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let mut plan = small_plan(Algorithm::Memit, Strategy::Batched, 8, 8, 5);
    let plan_path = write_plan(dir.path(), &plan);
    let lam = dir.path().join("lambda");
    let res = pm_edit(&["lambda-sweep", "--config", s(&plan_path), "--out", s(&lam), "--lambdas", "0.01,1,100"]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let svg = dir.path().join("lambda.svg");
    let res = pm_edit(&[
        "report", "--csv", s(&lam.join("metrics.csv")), "--metric", "ps", "--group-by", "lambda", "--out", s(&svg),
    ]);
    assert_eq!(res.status.code(), Some(0));
    let doc = fs::read_to_string(&svg).unwrap();
    assert!(doc.starts_with("<svg"));
    assert_eq!(doc.matches("<circle").count(), 3);

    plan.strategy = Strategy::Singular;
    plan.algorithm = Algorithm::Rome;
    plan.batch_size = 1;
    plan.total_edits = 4;
    plan.lambda = 0.0;
    let plan_path = write_plan(dir.path(), &plan);
    let layers = dir.path().join("layers");
    let res = pm_edit(&["layer-sweep", "--config", s(&plan_path), "--out", s(&layers), "--layers", "0,2"]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let rows = parse_metrics_csv(&fs::read_to_string(layers.join("metrics.csv")).unwrap()).unwrap();
    assert_eq!(rows.iter().map(|r| r.layer).collect::<Vec<_>>(), vec![0, 2]);
    let svg = dir.path().join("layers.svg");
    let res = pm_edit(&[
        "report", "--csv", s(&layers.join("metrics.csv")), "--metric", "s", "--group-by", "layer", "--out", s(&svg),
    ]);
    assert_eq!(res.status.code(), Some(0));
}

#[test]
fn report_rejects_malformed_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bad.csv");
    fs::write(&csv, "run_id,algorithm\nx,memit\n").unwrap();
    let res = pm_edit(&[
        "report", "--csv", s(&csv), "--metric", "ns", "--group-by", "batch-size", "--out", s(&dir.path().join("o.svg")),
    ]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("SchemaMismatch"));
    assert!(!dir.path().join("o.svg").exists());
}
