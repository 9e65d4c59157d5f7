use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn mepcert(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mepcert"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.json"), config).unwrap();
    dir
}

const DW10: &str = r#"{"model": {"name": "dw", "params": {"kappa": 10}}, "stability": {"trials": 8}}"#;

#[test]
fn mep_writes_path_and_metadata() {
    let dir = setup(DW10);
    let out = mepcert(dir.path(), &["mep", "exp.json"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let sol = json(&dir.path().join("out/solution.json"));
    assert_eq!(sol["schema_version"], 1);
    assert_eq!(sol["converged"], true);
    assert!((sol["sbar"].as_f64().unwrap() - 0.5).abs() < 1e-6);
    let csv = std::fs::read_to_string(dir.path().join("out/path.csv")).unwrap();
    assert!(csv.starts_with("alpha,y0,y1\n"));
    assert!(!csv.contains('\r'));
    assert_eq!(csv.lines().count(), 103);
    assert!(dir.path().join("out/path.svg").exists());
}

#[test]
fn invalid_configs_exit_2_without_output() {
    for (config, extra) in [
        (r#"{"solver": {"tol": -1e-8}}"#, None),
        (r#"{"solver": {"tolerance": 1e-8}}"#, None),
        ("not json", None),
        (DW10, Some("--solver.n=3")),
    ] {
        let dir = setup(config);
        let mut args = vec!["mep", "exp.json"];
        args.extend(extra);
        let out = mepcert(dir.path(), &args);
        assert_eq!(out.status.code(), Some(2), "{config}");
        assert!(!dir.path().join("out").exists());
    }
    let dir = setup(DW10);
    assert_eq!(mepcert(dir.path(), &["mep", "missing.json"]).status.code(), Some(2));
}

#[test]
fn overrides_reach_the_solver() {
    let dir = setup(DW10);
    let out = mepcert(
        dir.path(),
        &["mep", "exp.json", "--solver.n=20", "--output.directory=run"],
    );
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(json(&dir.path().join("run/solution.json"))["nodes"], 21);
}

#[test]
fn solver_failure_exits_1_with_a_diagnostic() {
    let dir = setup(r#"{"model": {"name": "mueller_brown"}, "solver": {"max_iters": 2, "tol": 1e-12}}"#);
    let out = mepcert(dir.path(), &["mep", "exp.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("solver error"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn certify_reports_on_double_wells() {
    let dir = setup(DW10);
    assert_eq!(mepcert(dir.path(), &["mep", "exp.json"]).status.code(), Some(0));
    let out = mepcert(
        dir.path(),
        &["certify", "exp.json", "out/path.csv", "--output.directory=cert"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = json(&dir.path().join("cert/certificate.json"));
    assert_eq!(r["assumptions"]["a_holds"], true);
    assert_eq!(r["assumptions"]["b_holds"], true);
    assert!(r["gamma_hat"].as_f64().unwrap().is_finite());
    assert_eq!(r["certified"], true);
    assert!((r["lambda"]["dprime_sbar"].as_f64().unwrap() + 4.0).abs() < 1e-5);
    let lambda = std::fs::read_to_string(dir.path().join("cert/lambda.csv")).unwrap();
    assert!(lambda.starts_with("alpha,lambda,dlambda\n"));

    assert_eq!(
        mepcert(
            dir.path(),
            &["mep", "exp.json", "--model.params.kappa=4", "--output.directory=dw4"]
        )
        .status
        .code(),
        Some(0)
    );
    let out = mepcert(
        dir.path(),
        &[
            "certify",
            "exp.json",
            "dw4/path.csv",
            "--model.params.kappa=4",
            "--output.directory=cert4",
        ],
    );
    assert_eq!(out.status.code(), Some(0));
    let r = json(&dir.path().join("cert4/certificate.json"));
    assert_eq!(r["assumptions"]["b_holds"], false);
    assert_eq!(r["assumptions"]["lowest_a"], false);
    assert_eq!(r["certified"], false);
}

#[test]
fn certify_a_straight_segment_reports_a_large_residual() {
    let dir = setup(r#"{"model": {"name": "mueller_brown"}}"#);
    let (a, b) = ([-0.558223634633, 1.441725841804], [0.623499404931, 0.028037758261]);
    let mut csv = String::from("alpha,y0,y1\n");
    for i in 0..=100 {
        let t = i as f64 / 100.0;
        csv += &format!("{t},{},{}\n", a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]));
    }
    std::fs::write(dir.path().join("straight.csv"), csv).unwrap();
    let out = mepcert(dir.path(), &["certify", "exp.json", "straight.csv"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = json(&dir.path().join("out/certificate.json"));
    assert!(r["residual"]["y_norm"].as_f64().unwrap() > 100.0);
    assert_eq!(r["certified"], false);
}

#[test]
fn certify_rejects_inadmissible_paths() {
    let dir = setup(DW10);
    std::fs::write(dir.path().join("bad.csv"), "alpha,y0,y1\n0,0,0\n1,0,0\n").unwrap();
    std::fs::write(dir.path().join("short.csv"), "alpha,y0\n0,-1\n0.5,0\n1,1\n").unwrap();
    for file in ["bad.csv", "short.csv", "absent.csv"] {
        let out = mepcert(dir.path(), &["certify", "exp.json", file]);
        assert_eq!(out.status.code(), Some(1), "{file}");
    }
}

#[test]
fn perturb_writes_the_study() {
    let dir = setup(DW10);
    let out = mepcert(dir.path(), &["perturb", "exp.json"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let s = json(&dir.path().join("out/study.json"));
    let slope = s["slope"]["slope"].as_f64().unwrap();
    assert!((0.8..=1.2).contains(&slope), "{slope}");
    let csv = std::fs::read_to_string(dir.path().join("out/study.csv")).unwrap();
    assert!(csv.starts_with("delta,model_error_c1,subspace_error,mep_error_c1,minA_shift,minB_shift,converged\n"));
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn perturb_keeps_failing_rows() {
    let dir = setup(DW10);
    let out = mepcert(
        dir.path(),
        &["perturb", "exp.json", "--perturbation.deltas=[5.0, 0.001]"],
    );
    assert_eq!(out.status.code(), Some(0));
    let csv = std::fs::read_to_string(dir.path().join("out/study.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert!(rows[0].ends_with(",true"));
    assert!(rows[1].starts_with("5.0") && rows[1].ends_with(",false"), "{}", rows[1]);
}

#[test]
fn perturb_rejects_empty_amplitudes() {
    let dir = setup(DW10);
    let out = mepcert(dir.path(), &["perturb", "exp.json", "--perturbation.deltas=[]"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn counterexamples_on_their_double_wells() {
    let dir = setup(DW10);
    let out = mepcert(dir.path(), &["counterexample", "degenerate", "exp.json"]);
    assert_eq!(out.status.code(), Some(0));
    let csv = std::fs::read_to_string(dir.path().join("out/degenerate.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("n,ynorm_f,xnorm_psi,ratio"));
    let ys: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(ys.len(), 5);
    assert!(ys.windows(2).all(|w| w[1] < w[0]));

    let out = mepcert(dir.path(), &["counterexample", "swapped", "exp.json"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(json(&dir.path().join("out/swapped.json"))["sigma_j"], 0.5);
}

#[test]
fn unknown_counterexample_kind_exits_2() {
    let dir = setup(DW10);
    assert_eq!(
        mepcert(dir.path(), &["counterexample", "foo", "exp.json"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(mepcert(dir.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = mepcert(dir.path(), &["selftest"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().all(|l| l.starts_with("PASS")), "{text}");
}
