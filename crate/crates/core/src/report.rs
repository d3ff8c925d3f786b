//! Canonical text forms of every output artifact.
//!
//! All serialization happens here so repeated runs produce byte-identical
//! files. Schemas:
//!
//! - metrics CSV: header `id,arrival,ttft,p99_tbt,slo_met`, one row per
//!   request in id order, floats in shortest round-trip form, `slo_met`
//!   as `true`/`false`.
//! - CDF CSV: header `value,cumulative_fraction`, rows sorted by value.
//! - iteration log: newline-delimited JSON, one object per iteration.
//! - summary / sweep / compare: single JSON documents carrying a
//!   `schema_version` field.

use std::fmt::Write as _;

use serde::Serialize;

use crate::engine::SimResult;
use crate::metrics::{slo_attainment, tbt_attainment, ttft_attainment, RequestMetrics};
use crate::sweep::{CompareResult, SweepResult};

pub fn metrics_csv(metrics: &[RequestMetrics]) -> String {
    let mut rows: Vec<&RequestMetrics> = metrics.iter().collect();
    rows.sort_by_key(|m| m.id);
    let mut out = String::from("id,arrival,ttft,p99_tbt,slo_met\n");
    for m in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            m.id, m.arrival_time, m.ttft, m.p99_tbt, m.slo_met
        )
        .expect("string writes cannot fail");
    }
    out
}

pub fn cdf_csv(points: &[(f64, f64)]) -> String {
    let mut out = String::from("value,cumulative_fraction\n");
    for &(value, fraction) in points {
        writeln!(out, "{value},{fraction}").expect("string writes cannot fail");
    }
    out
}

pub fn iteration_log_jsonl(result: &SimResult) -> String {
    let mut out = String::new();
    for log in &result.iterations {
        out.push_str(&serde_json::to_string(log).expect("logs serialize"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Serialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub num_requests: usize,
    pub attainment: f64,
    pub ttft_attainment: f64,
    pub tbt_attainment: f64,
    pub total_iterations: usize,
    pub final_clock: f64,
}

pub fn run_summary(result: &SimResult, metrics: &[RequestMetrics]) -> RunSummary {
    RunSummary {
        schema_version: crate::config::SCHEMA_VERSION,
        num_requests: metrics.len(),
        attainment: slo_attainment(metrics),
        ttft_attainment: ttft_attainment(metrics),
        tbt_attainment: tbt_attainment(metrics),
        total_iterations: result.iterations.len(),
        final_clock: result.final_clock,
    }
}

pub fn summary_json(result: &SimResult, metrics: &[RequestMetrics]) -> String {
    to_pretty_json(&run_summary(result, metrics))
}

pub fn sweep_json(sweep: &SweepResult) -> String {
    to_pretty_json(sweep)
}

pub fn compare_json(compare: &CompareResult) -> String {
    to_pretty_json(compare)
}

fn to_pretty_json<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    text
}
