//! Attainment grid for a memory-pressured synthetic workload.
//!
//! Runs every scheduling policy and cache mode across a few request rates
//! and prints mean SLO attainment over seeds. Useful for eyeballing where
//! the pool saturates and how much the hybrid cache and adaptive
//! scheduling buy at that point.
//!
//! Run with: cargo run -p servesim-core --release --example pressure

use servesim_core::config::{CacheMode, SchedulerPolicy, SimConfig};
use servesim_core::metrics::slo_attainment;
use servesim_core::sweep::run_point;
use servesim_core::workload::{ArrivalProcess, LengthDistribution, WorkloadSpec};

fn pressured_config() -> SimConfig {
    SimConfig {
        total_blocks: 192,
        block_size: 8,
        cost_model: servesim_core::cost::CostCoefficients {
            c0: 0.008,
            c_prefill: 2e-5,
            c_decode: 3e-4,
            c_ctx: 1e-7,
            rho: 1e-6,
        },
        workload: Some(WorkloadSpec {
            n_requests: 200,
            input_dist: LengthDistribution::Uniform { lo: 64, hi: 192 },
            output_dist: LengthDistribution::Uniform { lo: 32, hi: 96 },
            arrival: ArrivalProcess::Poisson { rate: 2.0 },
            length_seed: 7,
            fixed_request_set: true,
        }),
        ..SimConfig::default()
    }
}

fn main() {
    let base = pressured_config();
    let rates = [2.0, 4.0, 6.0, 8.0];
    let seeds = [0u64, 1, 2, 3, 4];
    let combos = [
        (SchedulerPolicy::Adaptive, CacheMode::Hybrid),
        (SchedulerPolicy::Adaptive, CacheMode::KvOnly),
        (SchedulerPolicy::Fcfs, CacheMode::KvOnly),
        (SchedulerPolicy::Random, CacheMode::KvOnly),
    ];
    println!(
        "{:<22} {}",
        "policy/cache",
        rates.map(|r| format!("{r:>7}")).join(" ")
    );
    for (policy, cache) in combos {
        let cfg = SimConfig {
            scheduler_policy: policy,
            cache_mode: cache,
            ..base.clone()
        };
        let mut row = format!("{:<22}", format!("{policy:?}/{cache:?}"));
        for (ri, &rate) in rates.iter().enumerate() {
            let mut sum = 0.0;
            for &seed in &seeds {
                let metrics = run_point(&cfg, Some(rate), ri as u64, seed).expect("point runs");
                sum += slo_attainment(&metrics);
            }
            row.push_str(&format!(" {:>7.2}", sum / seeds.len() as f64));
        }
        println!("{row}");
    }
}
