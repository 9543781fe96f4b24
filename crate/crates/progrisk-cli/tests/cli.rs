//! End-to-end tests of the `progrisk` binary: every command is run as a
//! subprocess, exactly as a user would, and judged on exit code, output
//! files, and stderr.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn progrisk(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_progrisk"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary spawns")
}

fn assert_success(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed with {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Small but large enough that exact-cell matching leaves every outer fold
/// at least one case and one control.
const CONFIG: &str = "\
seed = 11
cohort.n_subjects = 160
cohort.feature_dim = 4
model.hidden_dims = 4
train.epochs = 2
train.batch_knees = 8
train.approach = riskform2
train.horizon_years = 1
bootstrap.n_resamples = 200
run.threads = 0
";

fn write_config(dir: &Path) {
    fs::write(dir.join("run.conf"), CONFIG).unwrap();
}

#[test]
fn simulate_train_evaluate_report_flow() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    write_config(dir);

    // Simulate twice: byte-identical CSV, config sidecar present.
    let out = progrisk(dir, &["simulate", "--config", "run.conf"]);
    assert_success(&out, "simulate");
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(stdout.contains("Set1"), "summary missing group sizes: {stdout}");
    let csv = fs::read(dir.join("out/cohort.csv")).unwrap();
    assert!(dir.join("out/cohort.csv.config").exists());
    assert_success(&progrisk(dir, &["simulate", "--config", "run.conf"]), "second simulate");
    assert_eq!(fs::read(dir.join("out/cohort.csv")).unwrap(), csv, "simulate is not byte-stable");

    // Train twice: manifest lists 42 members and reruns are byte-identical.
    assert_success(&progrisk(dir, &["train", "--config", "run.conf"]), "train");
    let manifest = fs::read_to_string(dir.join("out/bundle/manifest.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(parsed["members"].as_array().unwrap().len(), 42);
    assert_eq!(parsed["approach"], "riskform2");
    assert_success(&progrisk(dir, &["train", "--config", "run.conf"]), "second train");
    assert_eq!(
        fs::read_to_string(dir.join("out/bundle/manifest.json")).unwrap(),
        manifest,
        "training is not byte-stable"
    );

    // Evaluate with the bundle as its own reference: DeLong p must be 1.
    let out = progrisk(
        dir,
        &["evaluate", "--config", "run.conf", "--scope", "internal", "--reference", "out/bundle/manifest.json"],
    );
    assert_success(&out, "evaluate");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("out/report.json")).unwrap()).unwrap();
    assert_eq!(report["delong_vs_reference"]["p_value"], 1.0);
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["subgroups"].as_array().unwrap().len(), 4);
    assert_eq!(report["klg"].as_array().unwrap().len(), 5);

    // A second evaluation reproduces the report byte for byte.
    let bytes = fs::read(dir.join("out/report.json")).unwrap();
    assert_success(
        &progrisk(
            dir,
            &["evaluate", "--config", "run.conf", "--scope", "internal", "--reference", "out/bundle/manifest.json"],
        ),
        "second evaluate",
    );
    assert_eq!(fs::read(dir.join("out/report.json")).unwrap(), bytes, "evaluate is not byte-stable");

    // Report: tables to stdout, exports on request, absent metrics dashed.
    let out = progrisk(dir, &["report", "out/report.json", "--export-dir", "exports"]);
    assert_success(&out, "report");
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(stdout.contains("headline metrics"), "{stdout}");
    assert!(stdout.contains('—'), "no dashed absent metric in:\n{stdout}");
    for name in ["tables.txt", "main.csv", "subgroups.csv", "klg.csv"] {
        assert!(dir.join("exports").join(name).exists(), "missing export {name}");
    }
    let klg_csv = fs::read_to_string(dir.join("exports/klg.csv")).unwrap();
    assert_eq!(klg_csv.lines().count(), 1 + 5, "klg export should have one row per grade");
}

#[test]
fn corrupt_csv_row_is_cited_with_exit_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    write_config(dir);
    assert_success(&progrisk(dir, &["simulate", "--config", "run.conf"]), "simulate");

    let csv_path = dir.join("out/cohort.csv");
    let text = fs::read_to_string(&csv_path).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let mut fields: Vec<&str> = lines[3].split(',').collect();
    fields[10] = "1"; // positive at 1 year...
    fields[11] = "0"; // ...but negative at 2: labels are no longer nested
    lines[3] = fields.join(",");
    fs::write(&csv_path, lines.join("\n") + "\n").unwrap();

    let out = progrisk(dir, &["train", "--config", "run.conf"]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr_of(&out));
    assert!(stderr_of(&out).contains("row 4"), "row not cited: {}", stderr_of(&out));
}

#[test]
fn unknown_config_key_exits_1_with_line_and_key() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    fs::write(dir.join("bad.conf"), "seed = 7\ncohort.n_sujects = 50\n").unwrap();
    let out = progrisk(dir, &["simulate", "--config", "bad.conf"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = stderr_of(&out);
    assert!(stderr.contains("line 2"), "line not cited: {stderr}");
    assert!(stderr.contains("cohort.n_sujects"), "key not cited: {stderr}");
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    write_config(dir);

    let out = progrisk(dir, &["evaluate", "--config", "run.conf", "--scope", "sideways"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("internal or external"), "{}", stderr_of(&out));

    let out = progrisk(dir, &["train", "--config", "missing.conf"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("missing.conf"), "{}", stderr_of(&out));

    let out = progrisk(dir, &["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));

    let out = progrisk(dir, &["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn report_rejects_wrong_schema_version() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    fs::write(dir.join("future.json"), "{\"schema_version\": 99}").unwrap();
    let out = progrisk(dir, &["report", "future.json"]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr_of(&out));
    let stderr = stderr_of(&out);
    assert!(stderr.contains("schema version 99"), "{stderr}");
}
