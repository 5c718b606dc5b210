//! End-to-end tests of the `drobust` binary: every subcommand, the exit
//! code contract, reproducibility, and jobs-invariance of sweeps.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use drobust_cli::io::{read_dataset_csv, read_learn_rows, read_result_rows, PolicyDoc};

fn drobust() -> Command {
    Command::new(env!("CARGO_BIN_EXE_drobust"))
}

fn run_ok(args: &[&str]) -> String {
    let out = drobust().args(args).output().expect("spawn drobust");
    assert!(
        out.status.success(),
        "drobust {args:?} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn run_err(args: &[&str]) -> Output {
    let out = drobust().args(args).output().expect("spawn drobust");
    assert!(!out.status.success(), "drobust {args:?} unexpectedly succeeded");
    out
}

fn simulate(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let path = dir.join(format!("data-{n}-{seed}.csv"));
    run_ok(&[
        "simulate",
        "--env",
        "discrete-default",
        "--n",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
        "--log-propensity",
        "--out",
        path.to_str().unwrap(),
    ]);
    path
}

#[test]
fn simulate_writes_identical_files_for_identical_flags() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = run_ok(&[
        "simulate", "--env", "softmax5", "--n", "128", "--seed", "7", "--log-propensity",
        "--out", dir.path().join("a.csv").to_str().unwrap(),
    ]);
    assert!(stdout.contains("wrote 128 rows"), "summary line missing: {stdout}");
    run_ok(&[
        "simulate", "--env", "softmax5", "--n", "128", "--seed", "7", "--log-propensity",
        "--out", dir.path().join("b.csv").to_str().unwrap(),
    ]);
    let a = std::fs::read(dir.path().join("a.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b.csv")).unwrap();
    assert_eq!(a, b, "same flags must produce byte-identical datasets");

    let data = read_dataset_csv(&dir.path().join("a.csv"), Some(5)).unwrap();
    assert_eq!(data.len(), 128);
    assert_eq!(data.state_dim(), 2);
    assert!(data.samples().iter().all(|s| (0.0..=1.0).contains(&s.reward)));
}

#[test]
fn evaluate_emits_rows_with_truth_and_squared_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), 256, 3);
    let out = dir.path().join("results.csv");
    let records = dir.path().join("records.json");
    run_ok(&[
        "evaluate",
        "--data", data.to_str().unwrap(),
        "--env", "discrete-default",
        "--method", "snips,ldr2ope",
        "--delta", "0.1,0.3",
        "--known-propensity",
        "--outcome", "knn:20",
        "--out", out.to_str().unwrap(),
        "--records", records.to_str().unwrap(),
    ]);
    let rows = read_result_rows(&out).unwrap();
    assert_eq!(rows.len(), 4);
    for row in &rows {
        assert_eq!(row.n, 256);
        let estimate = row.estimate.expect("estimate present");
        let truth = row.truth.expect("truth present for known env");
        let sq = row.sq_err.expect("sq_err present");
        assert!((sq - (estimate - truth) * (estimate - truth)).abs() < 1e-15);
    }
    // canonical order: method, then delta
    let methods: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(methods, ["ldr2ope", "ldr2ope", "snips", "snips"]);

    let text = std::fs::read_to_string(&records).unwrap();
    let json: serde_json::Value = serde_json::from_str(&text).unwrap();
    let dr = &json["ldr2ope@delta=0.1"];
    assert!(dr["alpha"].is_number());
    assert!(dr["per_fold"].as_array().is_some_and(|f| !f.is_empty()));

    // evaluation and its oracle sidecar are reproducible
    let out2 = dir.path().join("results2.csv");
    run_ok(&[
        "evaluate",
        "--data", data.to_str().unwrap(),
        "--env", "discrete-default",
        "--method", "snips,ldr2ope",
        "--delta", "0.1,0.3",
        "--known-propensity",
        "--outcome", "knn:20",
        "--out", out2.to_str().unwrap(),
    ]);
    let rows2 = read_result_rows(&out2).unwrap();
    for (a, b) in rows.iter().zip(&rows2) {
        assert_eq!(a.estimate, b.estimate);
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.status, b.status);
    }
}

#[test]
fn ips_blowup_rows_carry_inf_and_the_degeneracy_status() {
    let dir = tempfile::tempdir().unwrap();
    // every logged action has target/behavior ratio 2/7 < 1, so S_w < 1
    // and small δ lands in the diverging regime for unnormalized weights
    let data = dir.path().join("small-weights.csv");
    let mut text = String::from("s0,action,reward,propensity\n");
    for i in 0..40 {
        text.push_str(&format!("0,0,{},0.7\n", if i % 2 == 0 { "0" } else { "0.25" }));
    }
    std::fs::write(&data, text).unwrap();

    let out = dir.path().join("blowup.csv");
    run_ok(&[
        "evaluate",
        "--data", data.to_str().unwrap(),
        "--env", "discrete-default",
        "--method", "ips,snips",
        "--delta", "0.5",
        "--known-propensity",
        "--out", out.to_str().unwrap(),
    ]);
    let rows = read_result_rows(&out).unwrap();
    let ips = rows.iter().find(|r| r.method == "ips").unwrap();
    assert_eq!(ips.status, "alpha-infinite");
    assert_eq!(ips.estimate, Some(f64::INFINITY));
    let snips = rows.iter().find(|r| r.method == "snips").unwrap();
    assert_eq!(snips.status, "finite");
    assert!(snips.estimate.unwrap().is_finite());
}

#[test]
fn degeneracy_report_names_both_weightings_and_their_regimes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("small-weights.csv");
    let mut text = String::from("s0,action,reward,propensity\n");
    for i in 0..40 {
        text.push_str(&format!("0,0,{},0.7\n", if i % 2 == 0 { "0" } else { "0.25" }));
    }
    std::fs::write(&data, text).unwrap();

    let stdout = run_ok(&[
        "degeneracy",
        "--data", data.to_str().unwrap(),
        "--env", "discrete-default",
        "--delta", "0.5",
        "--known-propensity",
    ]);
    let ips_line = stdout.lines().find(|l| l.starts_with("ips")).unwrap();
    assert!(ips_line.contains("S_w"), "{stdout}");
    assert!(
        stdout.contains("at delta = 0.5: alpha-infinite"),
        "ips regime missing: {stdout}"
    );
    assert!(stdout.contains("at delta = 0.5: finite"), "snips regime missing: {stdout}");
    assert!(stdout.contains("-ln S_w"), "threshold printout missing: {stdout}");
}

#[test]
fn learn_is_reproducible_and_its_policy_document_is_complete() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), 200, 5);
    let args = |out: &Path| {
        vec![
            "learn".to_string(),
            "--data".to_string(), data.to_str().unwrap().to_string(),
            "--method".to_string(), "snips-max".to_string(),
            "--delta".to_string(), "0.2".to_string(),
            "--known-propensity".to_string(),
            "--restarts".to_string(), "2".to_string(),
            "--max-outer-iters".to_string(), "5".to_string(),
            "--seed".to_string(), "11".to_string(),
            "--policy-out".to_string(), out.to_str().unwrap().to_string(),
        ]
    };
    let p1 = dir.path().join("p1.json");
    let p2 = dir.path().join("p2.json");
    run_ok(&args(&p1).iter().map(String::as_str).collect::<Vec<_>>());
    run_ok(&args(&p2).iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(
        std::fs::read(&p1).unwrap(),
        std::fs::read(&p2).unwrap(),
        "fixed seed must reproduce the policy document byte for byte"
    );
    let doc = PolicyDoc::load(&p1).unwrap();
    assert_eq!(doc.kind, "linear-softmax");
    assert!(doc.final_objective.is_some());
    let config = doc.training_config.as_ref().expect("training config recorded");
    assert_eq!(config["method"], "snips-max");
    assert_eq!(config["seed"], 11);
    doc.to_policy().unwrap();
}

#[test]
fn whole_domain_negative_dr_moments_exit_4_with_a_trace() {
    let dir = tempfile::tempdir().unwrap();
    // poison: rare (propensity 0.001) max-reward rows whose neighborhoods
    // are all zero-reward, so the fitted outcome model overshoots wildly
    // and the bias-corrected moment goes negative over the whole α range
    let data = dir.path().join("poison.csv");
    let mut text = String::from("s0,action,reward,propensity\n");
    for i in 0..40 {
        text.push_str(&format!("{},{},0,0.9\n", (i % 20) as f64 / 20.0, i % 2));
    }
    for i in 0..10 {
        text.push_str(&format!("{},0,1,0.001\n", (i % 20) as f64 / 20.0 + 0.025));
    }
    std::fs::write(&data, text).unwrap();

    let policy_out = dir.path().join("policy.json");
    let out = drobust()
        .args([
            "learn",
            "--data", data.to_str().unwrap(),
            "--method", "cdr2opl",
            "--delta", "0.2",
            "--known-propensity",
            "--outcome", "knn:30",
            "--restarts", "2",
            "--max-outer-iters", "3",
            "--policy-out", policy_out.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let trace = dir.path().join("policy.json.trace.json");
    assert!(trace.exists(), "optimization failure must leave a trace file");
    let text = std::fs::read_to_string(&trace).unwrap();
    let json: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(json["error"].as_str().is_some_and(|e| !e.is_empty()));
    assert!(!policy_out.exists(), "no policy document on failure");
}

#[test]
fn sweep_output_is_jobs_invariant_and_cached() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("sweep.json");
    std::fs::write(
        &config,
        r#"{
            "env": {"name": "discrete-default"},
            "task": "evaluate",
            "methods": ["snips", "ips"],
            "deltas": [0.1, 0.3],
            "n_grid": [64, 128],
            "seeds": [1, 2, 3],
            "known_propensity": true
        }"#,
    )
    .unwrap();

    let strip = |path: &Path| {
        let mut rows = read_result_rows(path).unwrap();
        for r in &mut rows {
            r.wall_ms = 0;
        }
        rows
    };
    let out1 = dir.path().join("s1.csv");
    let out8 = dir.path().join("s8.csv");
    run_ok(&["sweep", "--config", config.to_str().unwrap(), "--out", out1.to_str().unwrap(), "--jobs", "1"]);
    run_ok(&["sweep", "--config", config.to_str().unwrap(), "--out", out8.to_str().unwrap(), "--jobs", "8"]);
    let rows1 = strip(&out1);
    assert_eq!(rows1.len(), 2 * 2 * 2 * 3);
    assert_eq!(rows1, strip(&out8), "worker count must not change results");
    assert!(dir.path().join("s1.csv.oracle.json").exists(), "oracle sidecar missing");

    // env var path: same cells, same rows
    let outenv = dir.path().join("senv.csv");
    let out = drobust()
        .env("DROBUST_JOBS", "2")
        .args(["sweep", "--config", config.to_str().unwrap(), "--out", outenv.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(rows1, strip(&outenv));

    // every row is sane: estimates finite or inf-with-status, truths shared per delta
    for row in &rows1 {
        assert!(row.truth.is_some());
        if row.estimate == Some(f64::INFINITY) {
            assert_eq!(row.status, "alpha-infinite");
        }
    }
}

#[test]
fn learn_sweep_emits_oracle_columns() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("sweep.json");
    std::fs::write(
        &config,
        r#"{
            "env": {"name": "discrete-default"},
            "task": "learn",
            "methods": ["snips-max"],
            "deltas": [0.3],
            "n_grid": [96],
            "seeds": [1, 2],
            "known_propensity": true,
            "restarts": 2,
            "max_outer_iters": 5,
            "regret": true,
            "oracle_restarts": 2
        }"#,
    )
    .unwrap();
    let out = dir.path().join("learn.csv");
    run_ok(&["sweep", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "--jobs", "2"]);
    let rows = read_learn_rows(&out).unwrap();
    assert_eq!(rows.len(), 2);
    for row in &rows {
        assert_eq!(row.status, "ok");
        assert!(row.value_hat.is_some());
        assert!(row.oracle_value.unwrap().is_finite());
        // regret against the in-class reference; MC noise can make tiny
        // negative values possible in principle, but not large ones
        assert!(row.oracle_regret.unwrap() > -1e-6);
    }
}

#[test]
fn oracle_command_caches_and_reports_regret() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("oracle.json");
    let args = [
        "oracle",
        "--env", "discrete-default",
        "--target-temperature", "1",
        "--delta", "0.1",
        "--cache", cache.to_str().unwrap(),
    ];
    let first = run_ok(&args);
    assert!(cache.exists());
    let second = run_ok(&args);
    assert_eq!(first, second, "cached rerun must report the same value");
    assert!(first.starts_with("value = "));

    let regret = run_ok(&[
        "oracle",
        "--env", "discrete-default",
        "--uniform",
        "--delta", "0.1",
        "--regret",
        "--oracle-restarts", "2",
        "--cache", cache.to_str().unwrap(),
    ]);
    assert!(regret.contains("regret = "), "{regret}");
}

#[test]
fn exit_codes_separate_config_data_and_optimization_failures() {
    let dir = tempfile::tempdir().unwrap();

    // clap usage error → 2
    let out = run_err(&["evaluate", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));

    // unknown environment → 2
    let out = run_err(&[
        "simulate", "--env", "bandit9000", "--n", "8", "--seed", "1",
        "--out", dir.path().join("x.csv").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("configuration error"));

    // missing dataset → 3
    let out = run_err(&[
        "evaluate",
        "--data", dir.path().join("nope.csv").to_str().unwrap(),
        "--env", "discrete-default",
        "--delta", "0.1",
        "--out", dir.path().join("r.csv").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data error"));

    // malformed sweep config → 2
    let config = dir.path().join("bad.json");
    std::fs::write(
        &config,
        r#"{"env": {"name": "discrete-default"}, "task": "evaluate", "methods": ["snips"],
            "deltas": [0.1], "n_grid": [128, 64], "seeds": [1]}"#,
    )
    .unwrap();
    let out = run_err(&[
        "sweep", "--config", config.to_str().unwrap(),
        "--out", dir.path().join("s.csv").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));

    // bad DROBUST_JOBS → 2
    let good = dir.path().join("good.json");
    std::fs::write(
        &good,
        r#"{"env": {"name": "discrete-default"}, "task": "evaluate", "methods": ["snips"],
            "deltas": [0.1], "n_grid": [64], "seeds": [1]}"#,
    )
    .unwrap();
    let out = drobust()
        .env("DROBUST_JOBS", "many")
        .args([
            "sweep", "--config", good.to_str().unwrap(),
            "--out", dir.path().join("s2.csv").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn evaluate_without_propensities_fits_them() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("noprop.csv");
    run_ok(&[
        "simulate", "--env", "discrete-default", "--n", "300", "--seed", "9",
        "--out", data.to_str().unwrap(),
    ]);
    let out = dir.path().join("fitted.csv");
    run_ok(&[
        "evaluate",
        "--data", data.to_str().unwrap(),
        "--env", "discrete-default",
        "--method", "snips",
        "--delta", "0.2",
        "--propensity", "logistic",
        "--out", out.to_str().unwrap(),
    ]);
    let rows = read_result_rows(&out).unwrap();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].estimate.unwrap().is_finite());

    // but claiming known propensities on propensity-less data is a data error
    let out = run_err(&[
        "evaluate",
        "--data", data.to_str().unwrap(),
        "--env", "discrete-default",
        "--method", "snips",
        "--delta", "0.2",
        "--known-propensity",
        "--out", dir.path().join("r.csv").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
}
