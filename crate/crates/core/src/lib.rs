//! Discrete-event simulator for LLM inference request scheduling over a
//! hybrid KV/hidden cache.
//!
//! The crate models serving at the scheduling level: no neural network
//! runs. A unified block pool stores per-token cache vectors, an adaptive
//! scheduler composes each iteration's batch by solving a marginal-gain
//! knapsack over pending times and memory requirements, and a cost model
//! maps batches to iteration latencies. On top sit workload generators
//! (Poisson and Gamma arrivals, parametric or empirical lengths), latency
//! metrics (TTFT, per-request P99 TBT, SLO attainment), rate sweeps, and
//! policy/cache ablation grids.

pub mod config;
pub mod cost;
pub mod domain;
pub mod engine;
pub mod metrics;
pub mod pool;
pub mod report;
pub mod scheduler;
pub mod sweep;
pub mod workload;

pub use config::{CacheMode, SchedulerPolicy, SimConfig};
pub use cost::{calibrate_rho, hidden_extra_cost, iteration_latency, CostCoefficients};
pub use domain::{blocks_needed, token_memory_units, CacheType, RequestSpec, RequestState, SloSpec};
pub use engine::{run, SimResult, SimState};
pub use metrics::{compute_metrics, effective_throughput, slo_attainment, RequestMetrics};
pub use pool::BlockPool;
pub use scheduler::{FallbackMode, ScheduleOutcome, SchedulingInstance};
pub use sweep::{run_compare, run_sweep, CompareResult, SweepResult};
pub use workload::{
    load_trace, sample_lengths, synthesize_arrivals, ArrivalProcess, LengthDistribution, Workload,
    WorkloadSpec,
};
