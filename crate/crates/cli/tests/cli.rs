//! End-to-end checks of the binary: artifact layout, exit codes, and
//! byte-identical output regardless of worker count.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_asyncfl"))
}

fn base_config(scheme: &str, rounds: u64, extra: &str) -> String {
    format!(
        r#"{{
        "cell": {{
            "total_bandwidth_hz": 5e6,
            "noise_density_dbm_per_hz": -174,
            "cell_radius_km": 1.0
        }},
        "clients": {{
            "placement": "annulus",
            "count": 5,
            "inner_radius_km": 0.1,
            "outer_radius_km": 0.2,
            "tx_power_w": 0.2
        }},
        "task": {{
            "classes": 5,
            "feature_dim": 8,
            "hidden": 0,
            "per_class_train": 40,
            "per_class_test": 20,
            "separation": 3.0,
            "shards_per_client": 1,
            "local_steps": 2,
            "batch": 10,
            "learning_rate": 0.05
        }},
        "scheme": {scheme},
        "rounds": {rounds},
        "rho": 0.3,
        "seeds": 5,
        "eval_every": 4{extra}
    }}"#
    )
}

struct Workspace {
    dir: tempfile::TempDir,
    config: PathBuf,
}

fn workspace(config_text: &str) -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(&config, config_text).unwrap();
    Workspace { dir, config }
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name))
        .unwrap_or_else(|e| panic!("missing artifact {name}: {e}"))
}

#[test]
fn simulate_writes_results_and_summary() {
    let ws = workspace(&base_config(r#"{ "name": "random", "p": 0.6 }"#, 12, ""));
    let out_dir = ws.dir.path().join("out");
    let out = run(&[
        "simulate",
        "--config",
        ws.config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );

    let csv = read(&out_dir, "results.csv");
    assert!(csv.starts_with("# results-schema: v1\n"), "{csv}");
    assert!(csv.contains("run_id,scheme,rho,seed,round,n_participants"));
    // provenance + config + header + 12 data rows
    assert_eq!(csv.trim_end().lines().count(), 3 + 12);

    let summary: serde_json::Value = serde_json::from_str(&read(&out_dir, "summary.json")).unwrap();
    assert_eq!(summary["results_schema"], "v1");
    assert_eq!(summary["runs"].as_array().unwrap().len(), 1);
    assert_eq!(summary["runs"][0]["scheme"], "random");
}

#[test]
fn zero_rounds_yields_header_only_csv() {
    let ws = workspace(&base_config(r#"{ "name": "random", "p": 0.6 }"#, 0, ""));
    let out_dir = ws.dir.path().join("out");
    let out = run(&[
        "simulate",
        "--config",
        ws.config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let csv = read(&out_dir, "results.csv");
    assert_eq!(csv.trim_end().lines().count(), 3, "{csv}");
}

#[test]
fn unknown_field_exits_two_with_json_error() {
    let bad = base_config(r#"{ "name": "random", "p": 0.6 }"#, 12, "").replace("rounds", "total_rounds");
    let ws = workspace(&bad);
    let out_dir = ws.dir.path().join("out");
    let out = run(&[
        "simulate",
        "--config",
        ws.config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let err: serde_json::Value = serde_json::from_str(stderr.trim()).unwrap();
    assert_eq!(err["exit_code"], 2);
    assert_eq!(err["kind"], "config");
    assert!(
        err["error"].as_str().unwrap().contains("total_rounds"),
        "{err}"
    );
}

#[test]
fn missing_config_file_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "simulate",
        "--config",
        dir.path().join("nope.json").to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_single_cell_matches_simulate() {
    let ws = workspace(&base_config(r#"{ "name": "random", "p": 0.6 }"#, 12, ""));
    let sim_dir = ws.dir.path().join("sim");
    let sweep_dir = ws.dir.path().join("sweep");
    let common = ["--config", ws.config.to_str().unwrap(), "--seeds", "7", "--rho", "0.3"];
    let a = bin()
        .arg("simulate")
        .args(common)
        .args(["--out", sim_dir.to_str().unwrap()])
        .output()
        .unwrap();
    let b = bin()
        .arg("sweep")
        .args(common)
        .args(["--out", sweep_dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(a.status.success() && b.status.success());
    assert_eq!(read(&sim_dir, "results.csv"), read(&sweep_dir, "results.csv"));
    assert_eq!(read(&sim_dir, "summary.json"), read(&sweep_dir, "summary.json"));
}

#[test]
fn parallel_workers_do_not_change_output_bytes() {
    let ws = workspace(&base_config(r#"{ "name": "greedy", "k_sel": 2 }"#, 8, ""));
    let serial = ws.dir.path().join("serial");
    let threaded = ws.dir.path().join("threaded");
    for (dir, workers) in [(&serial, "1"), (&threaded, "3")] {
        let out = run(&[
            "sweep",
            "--config",
            ws.config.to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
            "--rho",
            "0.2,0.4",
            "--seeds",
            "3,4",
            "--parallel",
            workers,
        ]);
        assert!(
            out.status.success(),
            "stderr: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    assert_eq!(read(&serial, "results.csv"), read(&threaded, "results.csv"));
    assert_eq!(read(&serial, "summary.json"), read(&threaded, "summary.json"));
}

#[test]
fn sweep_rejects_rho_outside_unit_interval() {
    let ws = workspace(&base_config(r#"{ "name": "random", "p": 0.6 }"#, 4, ""));
    let out = run(&[
        "sweep",
        "--config",
        ws.config.to_str().unwrap(),
        "--out",
        ws.dir.path().join("out").to_str().unwrap(),
        "--rho",
        "1.5",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_with_named_seed_streams_requires_seeds_flag() {
    let named = base_config(r#"{ "name": "random", "p": 0.6 }"#, 4, "").replace(
        "\"seeds\": 5",
        r#""seeds": { "selection": 1, "fading": 2, "data": 3, "init": 4 }"#,
    );
    let ws = workspace(&named);
    let out = run(&[
        "sweep",
        "--config",
        ws.config.to_str().unwrap(),
        "--out",
        ws.dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--seeds"), "{stderr}");
}

#[test]
fn solve_writes_plan_and_diagnostics() {
    let ws = workspace(&base_config(r#"{ "name": "proposed" }"#, 6, ""));
    let out_dir = ws.dir.path().join("out");
    let out = run(&[
        "solve",
        "--config",
        ws.config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let plan: serde_json::Value = serde_json::from_str(&read(&out_dir, "plan.json")).unwrap();
    assert_eq!(plan["results_schema"], "v1");
    assert_eq!(plan["p"].as_array().unwrap().len(), 5);
    assert_eq!(plan["p"][0].as_array().unwrap().len(), 6);
    let diag = read(&out_dir, "diagnostics.csv");
    assert!(diag.contains("iteration,residual_norm,objective"));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("solved:"), "{stdout}");
}

#[test]
fn bounds_prints_report_and_rejects_bad_step_size() {
    let bounds_block = r#",
        "bounds": {
            "smoothness": 1.0,
            "grad_norm_bound": 1.0,
            "grad_variance": 0.5,
            "loss_gap": 3.0,
            "learning_rate": 0.125,
            "intervals": [1, 2, 1, 3, 2],
            "probabilities": [[1.0], [0.5], [1.0], [0.25], [0.8]]
        }"#;
    let ws = workspace(&base_config(r#"{ "name": "random", "p": 0.6 }"#, 4, bounds_block));
    let out = run(&["bounds", "--config", ws.config.to_str().unwrap()]);
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stdout).trim()).unwrap();
    assert!(report["interval_bound"].as_f64().unwrap() > 0.0);
    assert!(report["probability_bound"].as_f64().unwrap() > 0.0);
    assert_eq!(report["approx_intervals"].as_array().unwrap().len(), 5);

    let bad = base_config(r#"{ "name": "random", "p": 0.6 }"#, 4, bounds_block)
        .replace("\"learning_rate\": 0.125", "\"learning_rate\": 0.2");
    let ws_bad = workspace(&bad);
    let out_bad = run(&["bounds", "--config", ws_bad.config.to_str().unwrap()]);
    assert_eq!(out_bad.status.code(), Some(2));
}

#[test]
fn bounds_out_flag_writes_file_matching_stdout() {
    let bounds_block = r#",
        "bounds": {
            "smoothness": 1.0,
            "grad_norm_bound": 1.0,
            "grad_variance": 0.5,
            "loss_gap": 3.0,
            "learning_rate": 0.1,
            "intervals": [1, 1, 2]
        }"#;
    let ws = workspace(&base_config(r#"{ "name": "random", "p": 0.6 }"#, 4, bounds_block));
    let out_dir = ws.dir.path().join("out");
    let out = run(&[
        "bounds",
        "--config",
        ws.config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let file = read(&out_dir, "bounds.json");
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), file.trim());
}
