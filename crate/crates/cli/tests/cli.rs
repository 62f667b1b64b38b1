use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rode_qctl::{read_record, run, Cli};
use serde_json::Value;
use sha2::{Digest, Sha256};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_rode-qctl"));
    c.env_remove(rode_qctl::OUT_ENV);
    c
}

fn run_bin(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, text).unwrap();
    p
}

fn csv_digests(dir: &Path) -> BTreeMap<String, String> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), hex::encode(Sha256::digest(fs::read(&p).unwrap()))))
        .collect()
}

const SMALL: &[&str] = &[
    "--override",
    "numeric.samples=8",
    "--override",
    "numeric.num_controls=2",
    "--override",
    "numeric.max_evals=400",
    "--override",
    "numeric.tube_samples=50",
    "--override",
    "numeric.etas=[0.0,1.0]",
    "--override",
    "numeric.steps_per_unit=100",
];

fn small_run(command: &str, out: &Path, seed: &str) -> Output {
    let mut args = vec![command, "--out", out.to_str().unwrap(), "--seed", seed];
    args.extend_from_slice(SMALL);
    run_bin(&args)
}

#[test]
fn malformed_config_exits_2_without_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "{ not json");
    let out = tmp.path().join("out");
    let o = run_bin(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());

    let cfg = write_config(tmp.path(), r#"{"numeric": {"sampels": 3}}"#);
    let o = run_bin(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());

    let o = run_bin(&["simulate", "--out", out.to_str().unwrap(), "--override", "problem.eta=-1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("problem.eta"));
    assert!(!out.exists());
}

#[test]
fn validate_reports_named_violations() {
    let tmp = tempfile::tempdir().unwrap();
    let ok = write_config(tmp.path(), "{}");
    assert_eq!(run_bin(&["validate", "--config", ok.to_str().unwrap()]).status.code(), Some(0));

    let bad = write_config(
        tmp.path(),
        r#"{"noise": {"kind": "mixed-unitary", "branches": [{"probability": 0.6}, {"probability": 0.6}]}}"#,
    );
    let o = run_bin(&["validate", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with("noise.branches"));

    let o = run_bin(&["validate", "--override", "metric=[1.0,0.0,0.01]"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("metric[1]"));
}

#[test]
fn zero_noise_simulation_has_zero_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sim");
    let o = run_bin(&["simulate", "--out", out.to_str().unwrap(), "--override", "noise.kind=zero", "--override", "numeric.samples=3"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rec = read_record(&out).unwrap();
    assert!(rec["summary"]["max_error_op"].as_f64().unwrap() < 1e-12);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.starts_with("t,max_err,mean_err,q05,q95,linear_bound,geometric_bound\n"));
    let traj = fs::read_to_string(out.join("trajectories.csv")).unwrap();
    assert!(traj.starts_with("t,sample_index,u00_re,u00_im,u01_re,u01_im,u10_re,u10_im,u11_re,u11_im,flavor\n"));
    let noise = fs::read_to_string(out.join("noise.csv")).unwrap();
    assert!(noise.lines().next().unwrap().ends_with(",envelope"));
}

#[test]
fn bit_flip_density_is_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"system": {"drift": {}}, "noise": {"kind": "bit-flip", "flip_probability": 0.3}}"#);
    let out = tmp.path().join("flip");
    let o = run_bin(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--override", "numeric.samples=50"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rec = read_record(&out).unwrap();
    let s = &rec["summary"];
    assert!((s["exact_purity"].as_f64().unwrap() - 0.58).abs() < 1e-12);
    let rho = &s["exact_density"];
    assert!((rho[0][0][0].as_f64().unwrap() - 0.7).abs() < 1e-12);
    assert!((rho[1][1][0].as_f64().unwrap() - 0.3).abs() < 1e-12);
}

#[test]
fn artifacts_are_write_once() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("w");
    assert_eq!(small_run("simulate", &out, "1").status.code(), Some(0));
    let before = csv_digests(&out);
    let o = small_run("simulate", &out, "2");
    assert_ne!(o.status.code(), Some(0));
    assert_eq!(csv_digests(&out), before);
}

#[test]
fn identical_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    for command in ["simulate", "bounds", "geodesic", "optimize", "sweep", "wcnc"] {
        let a = tmp.path().join(format!("{command}-a"));
        let b = tmp.path().join(format!("{command}-b"));
        let oa = small_run(command, &a, "5");
        let ob = small_run(command, &b, "5");
        assert_eq!(oa.status.code(), ob.status.code(), "{command}");
        let da = csv_digests(&a);
        assert!(!da.is_empty(), "{command}");
        assert_eq!(da, csv_digests(&b), "{command}");
        let c = tmp.path().join(format!("{command}-c"));
        small_run(command, &c, "6");
        // Geodesics are seed-free on easy targets and small tube counts are zero.
        if !matches!(command, "geodesic" | "wcnc") {
            assert_ne!(da, csv_digests(&c), "{command} ignores the seed");
        }
    }
}

#[test]
fn record_lists_every_artifact_with_checksum() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("rec");
    assert_eq!(small_run("bounds", &out, "3").status.code(), Some(0));
    let rec = read_record(&out).unwrap();
    let listed: BTreeMap<String, String> = rec["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| (a["file"].as_str().unwrap().to_string(), a["sha256"].as_str().unwrap().to_string()))
        .collect();
    assert_eq!(listed, csv_digests(&out));
}

fn schema(v: &Value) -> Value {
    match v {
        Value::Object(m) => Value::Object(m.iter().map(|(k, x)| (k.clone(), schema(x))).collect()),
        Value::Array(_) => Value::String("array".into()),
        Value::String(_) => Value::String("string".into()),
        Value::Number(_) => Value::String("number".into()),
        Value::Bool(_) => Value::String("bool".into()),
        Value::Null => Value::String("null".into()),
    }
}

#[test]
fn run_record_schema_is_stable() {
    let golden: Value = serde_json::from_str(include_str!("golden/run_record_schema.json")).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    for command in ["simulate", "geodesic", "optimize"] {
        let out = tmp.path().join(command);
        small_run(command, &out, "0");
        let mut s = schema(&read_record(&out).unwrap());
        // Summary content is command-specific.
        s.as_object_mut().unwrap().insert("summary".into(), Value::String("object".into()));
        assert_eq!(s, golden, "{command}");
    }
}

#[test]
fn output_dir_comes_from_flag_then_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let env_dir = tmp.path().join("env");
    let cli = Cli {
        command: rode_qctl::Command::Simulate,
        config: None,
        seed: Some(1),
        out: None,
        overrides: vec!["numeric.samples=2".into(), "numeric.steps_per_unit=50".into()],
    };
    let outcome = run(&cli, Some(env_dir.clone())).unwrap();
    assert!(outcome.record.is_some());
    assert!(env_dir.join("run_record.json").exists());
    let flag_dir = tmp.path().join("flag");
    let cli = Cli { out: Some(flag_dir.clone()), ..cli };
    run(&cli, Some(tmp.path().join("unused"))).unwrap();
    assert!(flag_dir.join("trajectories.csv").exists());
    assert!(!tmp.path().join("unused").exists());

    let via_env = tmp.path().join("via-env");
    let o = bin()
        .env(rode_qctl::OUT_ENV, &via_env)
        .args(["simulate", "--override", "numeric.samples=2", "--override", "numeric.steps_per_unit=50"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(via_env.join("run_record.json").exists());
}

#[test]
fn experiment_csv_schemas() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("opt");
    small_run("optimize", &out, "0");
    let fig2 = fs::read_to_string(out.join("fig2_errors.csv")).unwrap();
    let mut lines = fig2.lines();
    assert_eq!(lines.next(), Some("control_index,mode,sample_index,err_op,err_fro"));
    assert_eq!(lines.count(), 2 * 2 * 8);

    let out = tmp.path().join("sweep");
    small_run("sweep", &out, "0");
    let fig3 = fs::read_to_string(out.join("fig3_sweep.csv")).unwrap();
    let rows: Vec<&str> = fig3.lines().collect();
    assert_eq!(rows[0], "eta,mode,mean_err_op,ci_lo,ci_hi");
    assert_eq!(rows.len(), 1 + 2 * 2);
    assert!(rows[1].starts_with("0.000000,blind,"));
}

#[test]
fn geodesic_exports_controls() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("geo");
    let o = run_bin(&["geodesic", "--out", out.to_str().unwrap(), "--override", "metric=[1.0,1.0,1.0]"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rec = read_record(&out).unwrap();
    assert!(rec["summary"]["endpoint_residual"].as_f64().unwrap() < 1e-6);
    assert!(rec["summary"]["control_residual"].as_f64().unwrap() < 1e-10);
    let g = fs::read_to_string(out.join("geodesic.csv")).unwrap();
    assert!(g.starts_with("t,v0,v1,v2,x00_re,"));
    let c = fs::read_to_string(out.join("geodesic_controls.csv")).unwrap();
    assert!(c.starts_with("t,h0,h1,h2\n"));
}

#[test]
fn nonconvergence_exits_4_with_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("nc");
    let o = run_bin(&[
        "geodesic",
        "--out",
        out.to_str().unwrap(),
        "--override",
        "numeric.shooting_tolerance=1e-30",
        "--override",
        "numeric.shooting_restarts=1",
        "--override",
        r#"problem.target={"gate":"H"}"#,
    ]);
    assert_eq!(o.status.code(), Some(4));
    let rec = read_record(&out).unwrap();
    assert_eq!(rec["summary"]["converged"], Value::Bool(false));
}
