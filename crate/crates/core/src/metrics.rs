//! Per-request latency metrics and SLO attainment.
//!
//! TTFT is the gap from arrival to the first emitted token. TBT samples
//! are the gaps between consecutive token emissions, decode phase only:
//! the arrival-to-first-token gap is never a TBT sample. A request meets
//! its SLO when both the TTFT target and the per-request P99 TBT target
//! hold.

use serde::Serialize;
use thiserror::Error;

use crate::domain::{RequestId, SloSpec};
use crate::engine::{RequestRecord, SimResult};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("request {id} emitted {emitted} of {expected} tokens; metrics need finished requests")]
    Unfinished {
        id: RequestId,
        emitted: usize,
        expected: u64,
    },
    #[error("no requests to aggregate")]
    Empty,
}

#[derive(Debug, Clone, Serialize)]
pub struct RequestMetrics {
    pub id: RequestId,
    pub arrival_time: f64,
    pub ttft: f64,
    pub tbt_series: Vec<f64>,
    pub p99_tbt: f64,
    pub slo_met: bool,
    pub ttft_met: bool,
    pub tbt_met: bool,
}

/// Nearest-rank percentile: the ceil(q * n)-th order statistic. Empty
/// input maps to zero, which covers single-token requests with no TBT
/// samples.
pub fn percentile_nearest_rank(samples: &[f64], q: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn compute_metrics(
    result: &SimResult,
    slo: &SloSpec,
) -> Result<Vec<RequestMetrics>, MetricsError> {
    result
        .requests
        .iter()
        .map(|r| compute_request_metrics(r, slo))
        .collect()
}

fn compute_request_metrics(
    record: &RequestRecord,
    slo: &SloSpec,
) -> Result<RequestMetrics, MetricsError> {
    if record.token_emit_times.len() as u64 != record.output_len {
        return Err(MetricsError::Unfinished {
            id: record.id,
            emitted: record.token_emit_times.len(),
            expected: record.output_len,
        });
    }
    let ttft = record.token_emit_times[0] - record.arrival_time;
    let tbt_series: Vec<f64> = record
        .token_emit_times
        .windows(2)
        .map(|w| w[1] - w[0])
        .collect();
    let p99_tbt = percentile_nearest_rank(&tbt_series, 0.99);
    let ttft_met = ttft <= slo.ttft_slo;
    let tbt_met = p99_tbt <= slo.p99_tbt_slo;
    Ok(RequestMetrics {
        id: record.id,
        arrival_time: record.arrival_time,
        ttft,
        tbt_series,
        p99_tbt,
        slo_met: ttft_met && tbt_met,
        ttft_met,
        tbt_met,
    })
}

/// Percentage of requests meeting both SLO targets.
pub fn slo_attainment(metrics: &[RequestMetrics]) -> f64 {
    attainment_by(metrics, |m| m.slo_met)
}

pub fn ttft_attainment(metrics: &[RequestMetrics]) -> f64 {
    attainment_by(metrics, |m| m.ttft_met)
}

pub fn tbt_attainment(metrics: &[RequestMetrics]) -> f64 {
    attainment_by(metrics, |m| m.tbt_met)
}

fn attainment_by(metrics: &[RequestMetrics], f: impl Fn(&RequestMetrics) -> bool) -> f64 {
    if metrics.is_empty() {
        return 0.0;
    }
    100.0 * metrics.iter().filter(|m| f(m)).count() as f64 / metrics.len() as f64
}

/// One measured point of a rate sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub rate: f64,
    /// Mean attainment across seeds.
    pub attainment: f64,
    pub ttft_attainment: f64,
    pub tbt_attainment: f64,
    pub per_seed: Vec<f64>,
}

/// Effective throughput: the largest tested rate whose attainment still
/// clears the threshold; zero when no point qualifies.
pub fn effective_throughput(points: &[SweepPoint], threshold: f64) -> f64 {
    points
        .iter()
        .filter(|p| p.attainment >= threshold)
        .map(|p| p.rate)
        .fold(0.0, f64::max)
}

/// Empirical CDF over arbitrary samples: sorted (value, cumulative
/// fraction) pairs.
pub fn cdf(samples: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &v)| (v, (i + 1) as f64 / n))
        .collect()
}
