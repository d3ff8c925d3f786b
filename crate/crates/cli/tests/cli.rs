//! End-to-end tests of the servesim binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn servesim(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_servesim"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, contents: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, contents).unwrap();
    path.display().to_string()
}

const HAND_TRACE: &str = "id,arrival_time,prompt_len,output_len\n0,0.0,8,2\n1,0.1,16,3\n";

fn default_config(dir: &Path) -> String {
    write(dir, "config.json", "{}")
}

#[test]
fn run_on_hand_trace_attains_100_percent() {
    let tmp = tempfile::tempdir().unwrap();
    let config = default_config(tmp.path());
    let trace = write(tmp.path(), "trace.csv", HAND_TRACE);
    let out = servesim(&["run", "--config", &config, "--trace", &trace, "--out", "out"], tmp.path());
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("out/summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["attainment"], 100.0);
    assert_eq!(summary["num_requests"], 2);
    let metrics = fs::read_to_string(tmp.path().join("out/metrics.csv")).unwrap();
    assert!(metrics.starts_with("id,arrival,ttft,p99_tbt,slo_met\n"));
    assert_eq!(metrics.lines().count(), 3);
    assert!(tmp.path().join("out/iterations.jsonl").exists());
}

#[test]
fn repeated_runs_write_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    let config = default_config(tmp.path());
    let trace = write(tmp.path(), "trace.csv", HAND_TRACE);
    for out_dir in ["a", "b"] {
        let out = servesim(
            &["run", "--config", &config, "--trace", &trace, "--out", out_dir],
            tmp.path(),
        );
        assert!(out.status.success());
    }
    for name in ["summary.json", "metrics.csv", "iterations.jsonl"] {
        let a = fs::read(tmp.path().join("a").join(name)).unwrap();
        let b = fs::read(tmp.path().join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
}

#[test]
fn sweep_is_reproducible_and_writes_cdfs() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write(
        tmp.path(),
        "config.json",
        r#"{
            "total_blocks": 256,
            "block_size": 8,
            "workload": {
                "n_requests": 30,
                "input_dist": {"uniform": {"lo": 8, "hi": 64}},
                "output_dist": {"uniform": {"lo": 2, "hi": 12}},
                "arrival": {"poisson": {"rate": 2.0}}
            }
        }"#,
    );
    for out_dir in ["s1", "s2"] {
        let out = servesim(
            &[
                "sweep", "--config", &config, "--rates", "2,5", "--seeds", "0,1",
                "--threshold", "90,60", "--out", out_dir,
            ],
            tmp.path(),
        );
        assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    for name in ["sweep.json", "ttft_cdf_rate_2.csv", "tbt_cdf_rate_5.csv"] {
        let a = fs::read(tmp.path().join("s1").join(name)).unwrap();
        let b = fs::read(tmp.path().join("s2").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical sweeps");
    }
    let sweep: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("s1/sweep.json")).unwrap())
            .unwrap();
    assert_eq!(sweep["points"].as_array().unwrap().len(), 2);
    assert_eq!(sweep["effective_throughput"].as_array().unwrap().len(), 2);
}

#[test]
fn calibrate_prints_the_fitted_slope() {
    let tmp = tempfile::tempdir().unwrap();
    let samples = write(tmp.path(), "samples.csv", "m,extra_seconds\n1,0.003\n2,0.006\n");
    let out = servesim(&["calibrate", "--samples", &samples], tmp.path());
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "0.003");
}

#[test]
fn compare_emits_one_row_per_combination() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write(
        tmp.path(),
        "config.json",
        r#"{
            "total_blocks": 256,
            "block_size": 8,
            "workload": {
                "n_requests": 20,
                "input_dist": {"uniform": {"lo": 8, "hi": 64}},
                "output_dist": {"uniform": {"lo": 2, "hi": 12}},
                "arrival": {"poisson": {"rate": 3.0}}
            }
        }"#,
    );
    let out = servesim(
        &[
            "compare", "--config", &config, "--policies", "adaptive,fcfs,random",
            "--cache", "hybrid,kv", "--out", "cmp",
        ],
        tmp.path(),
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().count(), 6, "one printed row per (policy, cache) pair");
    let grid: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("cmp/compare.json")).unwrap())
            .unwrap();
    assert_eq!(grid["rows"].as_array().unwrap().len(), 6);
}

#[test]
fn missing_arrivals_are_synthesized_from_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write(
        tmp.path(),
        "config.json",
        r#"{ "workload": { "n_requests": 2, "arrival": {"poisson": {"rate": 5.0}} } }"#,
    );
    let trace = write(
        tmp.path(),
        "trace.csv",
        "id,arrival_time,prompt_len,output_len\n0,,8,2\n1,,16,3\n",
    );
    let out = servesim(&["run", "--config", &config, "--trace", &trace, "--out", "out"], tmp.path());
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bad_inputs_exit_nonzero_with_messages() {
    let tmp = tempfile::tempdir().unwrap();
    let config = default_config(tmp.path());

    let empty = write(tmp.path(), "empty.csv", "id,arrival_time,prompt_len,output_len\n");
    let out = servesim(&["run", "--config", &config, "--trace", &empty, "--out", "out"], tmp.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("refusing to run"));

    let bad_config = write(tmp.path(), "bad.json", r#"{ "total_blocks": 0 }"#);
    let trace = write(tmp.path(), "trace.csv", HAND_TRACE);
    let out = servesim(&["run", "--config", &bad_config, "--trace", &trace, "--out", "out"], tmp.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("total_blocks"));

    let out = servesim(&["compare", "--config", &config, "--policies", "bogus"], tmp.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown policy"));

    // A trace without arrivals and a config without a workload section
    // cannot be simulated.
    let no_workload = write(tmp.path(), "nw.json", r#"{ "workload": null }"#);
    let gapped = write(
        tmp.path(),
        "gapped.csv",
        "id,arrival_time,prompt_len,output_len\n0,,8,2\n",
    );
    let out = servesim(&["run", "--config", &no_workload, "--trace", &gapped, "--out", "out"], tmp.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("workload section"));
}
