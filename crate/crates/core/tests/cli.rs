//! End-to-end runs of the `eifkit` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use eifkit::estimators::FoldPlan;
use serde_json::Value;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn eifkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eifkit"))
        .args(args)
        .output()
        .expect("spawn eifkit")
}

fn run(sub: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        sub,
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    eifkit(&args)
}

fn report(out: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap()
}

fn error_json(o: &Output) -> Value {
    serde_json::from_slice(o.stderr.trim_ascii()).expect("stderr is error JSON")
}

#[test]
fn estimate_on_four_rows_matches_hand_computation() {
    let tmp = tempfile::tempdir().unwrap();
    let seed = 5u64;
    // one treated and one untreated row per fold, so each training half has both
    let plan = FoldPlan::new(4, 2, seed).unwrap();
    let mut rows = [(0.0, 0u8, 0.0); 4];
    let ws = [[0.0, 1.0], [2.0, 3.0]];
    let ys = [[1.0, 2.0], [3.0, 5.0]];
    for k in 0..2 {
        for (j, &i) in plan.fold(k).iter().enumerate() {
            rows[i] = (ws[k][j], j as u8, ys[k][j]);
        }
    }
    let mut csv = String::from("w1,a,y\n");
    for (w, a, y) in rows {
        csv.push_str(&format!("{w},{a},{y}\n"));
    }
    fs::write(tmp.path().join("four.csv"), csv).unwrap();
    fs::write(
        tmp.path().join("cfg.json"),
        format!(
            r#"{{"csv": "four.csv", "folds": 2, "seed": {seed}, "include_eif": true,
               "learners": {{"outcome": {{"kind": "knn", "k": 1}},
                            "propensity": {{"kind": "knn", "k": 2}}}}}}"#
        ),
    )
    .unwrap();
    let out = tmp.path().join("out");
    let o = run("estimate", &tmp.path().join("cfg.json"), &out, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    // hand computation: q_hat is the single untreated outcome of the other
    // fold, g_hat = 1/2 everywhere
    let mut contrib = Vec::new();
    for k in 0..2 {
        let other = 1 - k;
        let q_hat = ys[other][0];
        for (a, &y) in ys[k].iter().enumerate() {
            let residual = if a == 0 { (y - q_hat) / 0.5 } else { 0.0 };
            contrib.push(residual + q_hat);
        }
    }
    let point = contrib.iter().sum::<f64>() / 4.0;
    let var = contrib.iter().map(|c| (c - point).powi(2)).sum::<f64>() / 16.0;
    let half = 1.959963984540054 * var.sqrt();

    let r = &report(&out)["estimate"];
    let close = |v: &Value, x: f64| (v.as_f64().unwrap() - x).abs() < 1e-12;
    assert!(close(&r["point"], point), "{r}");
    assert!(close(&r["variance"], var), "{r}");
    assert!(
        close(&r["ci_low"], point - half) && close(&r["ci_high"], point + half),
        "{r}"
    );
    assert_eq!(r["eif_values"].as_array().unwrap().len(), 4);
}

#[test]
fn verify_eif_on_bundled_law() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("v");
    let o = run("verify-eif", &fixtures().join("verify.json"), &out, &[]);
    assert!(o.status.success());
    let r = report(&out);
    // phi((1,0,1)) = (1 - 1) / (1/2) + 1 - 1/2
    let psi = &r["checks"][0];
    assert_eq!(psi["estimand"], "psi");
    assert!((psi["eif_integral"].as_f64().unwrap() - 0.5).abs() < 1e-15);
    assert!(r["max_discrepancy"].as_f64().unwrap() < 1e-6);
    let rows = fs::read_to_string(out.join("rows.csv")).unwrap();
    assert_eq!(rows.lines().count(), 3);
}

#[test]
fn verify_eif_defaults_to_point_mass_directions() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    let law = fixtures().join("four_atom.json");
    fs::write(
        &cfg,
        format!(r#"{{"distribution": {:?}}}"#, law.to_str().unwrap()),
    )
    .unwrap();
    let out = tmp.path().join("v");
    assert!(run("verify-eif", &cfg, &out, &[]).status.success());
    let r = report(&out);
    assert_eq!(r["checks"].as_array().unwrap().len(), 8);
    assert!(r["max_discrepancy"].as_f64().unwrap() < 1e-6);
}

#[test]
fn simulate_smoke_writes_one_row_per_rep() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("s");
    let o = run("simulate", &fixtures().join("simulate.json"), &out, &[]);
    assert!(o.status.success());
    let rows = fs::read_to_string(out.join("rows.csv")).unwrap();
    let mut lines = rows.lines();
    assert_eq!(
        lines.next().unwrap(),
        "rep,n,point,var,covered,scaled_error,error"
    );
    assert_eq!(lines.count(), 10);
}

#[test]
fn seed_flag_overrides_config_and_workers_do_not_change_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixtures().join("simulate.json");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let c = tmp.path().join("c");
    assert!(run("simulate", &cfg, &a, &["--workers", "1"])
        .status
        .success());
    assert!(run("simulate", &cfg, &b, &["--workers", "3"])
        .status
        .success());
    assert!(run("simulate", &cfg, &c, &["--seed", "12"])
        .status
        .success());
    let rows = |d: &Path| fs::read(d.join("rows.csv")).unwrap();
    assert_eq!(rows(&a), rows(&b));
    assert_ne!(rows(&a), rows(&c));
    assert_eq!(report(&c)["seed"], 12);
}

#[test]
fn decompose_and_remainder_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    assert!(
        run("decompose", &fixtures().join("decompose.json"), &out, &[])
            .status
            .success()
    );
    for d in report(&out)["decompositions"].as_array().unwrap() {
        let f = |k: &str| d[k].as_f64().unwrap();
        let gap = f("clt_term") - f("drift_term") + f("empirical_process_term")
            - f("remainder")
            - f("total_error");
        assert!(gap.abs() < 1e-10, "{d}");
    }
    let out = tmp.path().join("r");
    assert!(
        run("remainder", &fixtures().join("remainder.json"), &out, &[])
            .status
            .success()
    );
    let sweep = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().next().unwrap(), "estimand,n,remainder,bound");
    assert_eq!(sweep.lines().count(), 1 + 2 * 5);
    for s in report(&out)["sweeps"].as_array().unwrap() {
        assert!((s["slope"].as_f64().unwrap() + 0.5).abs() < 0.02, "{s}");
    }
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");

    let missing = tmp.path().join("missing.json");
    let o = run("estimate", &missing, &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["code"], "config");

    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"csv": "nowhere.csv"}"#).unwrap();
    let o = run("estimate", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    let e = error_json(&o);
    assert_eq!(e["code"], "config");
    assert!(e["message"].as_str().unwrap().contains("nowhere.csv"));

    fs::write(&cfg, r#"{"dgp": {"kind": "logistic-linear", "gamma": [0], "beta": [1], "noise_sd": 1}, "bogus": 1}"#).unwrap();
    assert_eq!(run("simulate", &cfg, &out, &[]).status.code(), Some(2));

    fs::write(&cfg, r#"{"command": "simulate", "distribution": "x.json"}"#).unwrap();
    assert_eq!(run("estimate", &cfg, &out, &[]).status.code(), Some(2));

    assert_eq!(
        eifkit(&["estimate", "--workers", "0"]).status.code(),
        Some(2)
    );
}

#[test]
fn runtime_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("d.csv"), "w1,a,y\n0,0,1\n1,2,2\n").unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"csv": "d.csv", "folds": 1}"#).unwrap();
    let o = run("estimate", &cfg, &tmp.path().join("o"), &[]);
    assert_eq!(o.status.code(), Some(1));
    let e = error_json(&o);
    assert_eq!(e["code"], "non_binary_treatment");
    assert!(e["message"].as_str().unwrap().contains("row 2"), "{e}");
}
