//! Rate sweeps and policy/cache ablation grids.
//!
//! Every (rate, seed) point is an independent simulation, so points run in
//! parallel and results merge in a fixed order; repeated sweeps with the
//! same inputs produce identical output.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::config::{CacheMode, SchedulerPolicy, SimConfig};
use crate::engine::{run, EngineError};
use crate::metrics::{
    cdf, compute_metrics, effective_throughput, slo_attainment, tbt_attainment, ttft_attainment,
    MetricsError, RequestMetrics, SweepPoint,
};
use crate::workload::{mix_seed, Workload, WorkloadError};

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("config has no workload section; sweeps need a synthetic workload")]
    NoWorkloadSpec,
    #[error("rates must be non-empty and strictly increasing")]
    BadRates,
    #[error("seeds must be non-empty")]
    NoSeeds,
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{} point(s) failed:\n{}", .0.len(), .0.join("\n"))]
    Points(Vec<String>),
}

/// Split per-cell results into values and per-point failure reports.
fn collect_cells<T>(
    cells: &[(usize, u64)],
    label: impl Fn(usize) -> String,
    results: Vec<Result<T, SweepError>>,
) -> Result<Vec<T>, SweepError> {
    let mut ok = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (&(idx, seed), result) in cells.iter().zip(results) {
        match result {
            Ok(v) => ok.push(v),
            Err(e) => failures.push(format!("{} seed={seed}: {e}", label(idx))),
        }
    }
    if failures.is_empty() {
        Ok(ok)
    } else {
        Err(SweepError::Points(failures))
    }
}

/// Sweep output: per-rate attainment plus effective throughput at each
/// requested threshold and plot-ready latency distributions.
#[derive(Debug, Clone, Serialize)]
pub struct SweepResult {
    pub schema_version: u32,
    pub seeds: Vec<u64>,
    pub thresholds: Vec<f64>,
    pub points: Vec<SweepPoint>,
    pub effective_throughput: Vec<ThroughputAtThreshold>,
    /// Pooled per-rate CDFs over per-request TTFT and P99 TBT.
    pub cdfs: Vec<RateCdfs>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ThroughputAtThreshold {
    pub threshold: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RateCdfs {
    pub rate: f64,
    pub ttft: Vec<(f64, f64)>,
    pub p99_tbt: Vec<(f64, f64)>,
}

/// Generate the workload for one (rate point, seed) cell and simulate it.
pub fn run_point(
    config: &SimConfig,
    rate: Option<f64>,
    point_idx: u64,
    seed: u64,
) -> Result<Vec<RequestMetrics>, SweepError> {
    let spec = config.workload.as_ref().ok_or(SweepError::NoWorkloadSpec)?;
    let length_salt = if spec.fixed_request_set {
        seed
    } else {
        mix_seed(seed, point_idx + 1)
    };
    let arrival_seed = mix_seed(mix_seed(config.rng_seed, seed), point_idx);
    let workload: Workload = spec.generate(length_salt, arrival_seed, rate, config.context_limit)?;
    let result = run(&workload, config)?;
    Ok(compute_metrics(&result, &config.slo_spec().map_err(EngineError::from)?)?)
}

/// Sweep the configured workload across request rates and seeds.
pub fn run_sweep(
    config: &SimConfig,
    rates: &[f64],
    seeds: &[u64],
    thresholds: &[f64],
) -> Result<SweepResult, SweepError> {
    if rates.is_empty() || rates.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SweepError::BadRates);
    }
    if seeds.is_empty() {
        return Err(SweepError::NoSeeds);
    }
    let cells: Vec<(usize, u64)> = (0..rates.len())
        .flat_map(|ri| seeds.iter().map(move |&s| (ri, s)))
        .collect();
    let results: Vec<Result<Vec<RequestMetrics>, SweepError>> = cells
        .par_iter()
        .map(|&(ri, seed)| run_point(config, Some(rates[ri]), ri as u64, seed))
        .collect();
    let results = collect_cells(&cells, |ri| format!("rate={}", rates[ri]), results)?;

    let mut points = Vec::with_capacity(rates.len());
    let mut cdfs = Vec::with_capacity(rates.len());
    let mut iter = results.into_iter();
    for &rate in rates {
        let mut per_seed = Vec::with_capacity(seeds.len());
        let mut joint_sum = 0.0;
        let mut ttft_sum = 0.0;
        let mut tbt_sum = 0.0;
        let mut pooled_ttft = Vec::new();
        let mut pooled_p99 = Vec::new();
        for _ in seeds {
            let metrics = iter.next().expect("one result per cell");
            let a = slo_attainment(&metrics);
            per_seed.push(a);
            joint_sum += a;
            ttft_sum += ttft_attainment(&metrics);
            tbt_sum += tbt_attainment(&metrics);
            pooled_ttft.extend(metrics.iter().map(|m| m.ttft));
            pooled_p99.extend(metrics.iter().map(|m| m.p99_tbt));
        }
        let n = seeds.len() as f64;
        points.push(SweepPoint {
            rate,
            attainment: joint_sum / n,
            ttft_attainment: ttft_sum / n,
            tbt_attainment: tbt_sum / n,
            per_seed,
        });
        cdfs.push(RateCdfs {
            rate,
            ttft: cdf(&pooled_ttft),
            p99_tbt: cdf(&pooled_p99),
        });
    }
    let throughput = thresholds
        .iter()
        .map(|&threshold| ThroughputAtThreshold {
            threshold,
            rate: effective_throughput(&points, threshold),
        })
        .collect();
    Ok(SweepResult {
        schema_version: crate::config::SCHEMA_VERSION,
        seeds: seeds.to_vec(),
        thresholds: thresholds.to_vec(),
        points,
        effective_throughput: throughput,
        cdfs,
    })
}

/// One row of the ablation grid.
#[derive(Debug, Clone, Serialize)]
pub struct CompareRow {
    pub policy: SchedulerPolicy,
    pub cache_mode: CacheMode,
    pub attainment: f64,
    pub ttft_attainment: f64,
    pub tbt_attainment: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareResult {
    pub schema_version: u32,
    pub seeds: Vec<u64>,
    pub rows: Vec<CompareRow>,
}

/// Run every (policy, cache mode) combination on identical workloads and
/// report attainment per combination.
pub fn run_compare(
    config: &SimConfig,
    policies: &[SchedulerPolicy],
    cache_modes: &[CacheMode],
    seeds: &[u64],
) -> Result<CompareResult, SweepError> {
    if seeds.is_empty() {
        return Err(SweepError::NoSeeds);
    }
    let combos: Vec<(SchedulerPolicy, CacheMode)> = policies
        .iter()
        .flat_map(|&p| cache_modes.iter().map(move |&c| (p, c)))
        .collect();
    let cells: Vec<(usize, u64)> = (0..combos.len())
        .flat_map(|ci| seeds.iter().map(move |&s| (ci, s)))
        .collect();
    let results: Vec<Result<Vec<RequestMetrics>, SweepError>> = cells
        .par_iter()
        .map(|&(ci, seed)| {
            let (policy, cache) = combos[ci];
            let combo_config = SimConfig {
                scheduler_policy: policy,
                cache_mode: cache,
                ..config.clone()
            };
            // Same workload for every combo: the point index is fixed so
            // only the seed varies the instance.
            run_point(&combo_config, None, 0, seed)
        })
        .collect();
    let results = collect_cells(
        &cells,
        |ci| format!("policy={:?} cache={:?}", combos[ci].0, combos[ci].1),
        results,
    )?;

    let mut rows = Vec::with_capacity(combos.len());
    let mut iter = results.into_iter();
    for &(policy, cache_mode) in &combos {
        let mut per_seed = Vec::with_capacity(seeds.len());
        let mut joint = 0.0;
        let mut ttft = 0.0;
        let mut tbt = 0.0;
        for _ in seeds {
            let metrics = iter.next().expect("one result per cell");
            let a = slo_attainment(&metrics);
            per_seed.push(a);
            joint += a;
            ttft += ttft_attainment(&metrics);
            tbt += tbt_attainment(&metrics);
        }
        let n = seeds.len() as f64;
        rows.push(CompareRow {
            policy,
            cache_mode,
            attainment: joint / n,
            ttft_attainment: ttft / n,
            tbt_attainment: tbt / n,
            per_seed,
        });
    }
    Ok(CompareResult {
        schema_version: crate::config::SCHEMA_VERSION,
        seeds: seeds.to_vec(),
        rows,
    })
}
