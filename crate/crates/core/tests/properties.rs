//! Property tests over the simulator's structural invariants.

use proptest::prelude::*;

use servesim_core::config::{CacheMode, SchedulerPolicy, SimConfig};
use servesim_core::domain::{blocks_needed, token_memory_units, CacheType, RequestSpec, SloSpec};
use servesim_core::engine::run;
use servesim_core::metrics::{compute_metrics, slo_attainment, RequestMetrics};
use servesim_core::pool::BlockPool;
use servesim_core::scheduler::{InstanceItem, SchedulingInstance};
use servesim_core::workload::{synthesize_arrivals, ArrivalProcess, Workload};

fn arb_items(max_n: usize) -> impl Strategy<Value = Vec<InstanceItem>> {
    prop::collection::vec((0.0f64..10.0, 1u64..=10), 1..=max_n).prop_map(|raw| {
        raw.into_iter()
            .enumerate()
            .map(|(i, (pending, half_m))| InstanceItem {
                id: i as u64,
                arrival_time: i as f64 * 0.1,
                pending,
                mem_max: half_m * 2,
            })
            .collect()
    })
}

fn arb_instance() -> impl Strategy<Value = SchedulingInstance> {
    (arb_items(10), 0.0f64..0.1, any::<bool>()).prop_map(|(items, rho, hybrid)| {
        let n_tracked = items.len() + 3;
        SchedulingInstance { items, n_tracked, rho, hybrid }
    })
}

proptest! {
    #[test]
    fn memory_arithmetic_ratios(n in 0u64..5000, block in 1u64..64) {
        prop_assert_eq!(
            token_memory_units(n, CacheType::Hidden).unwrap() * 2,
            token_memory_units(n, CacheType::Kv).unwrap()
        );
        prop_assert_eq!(
            blocks_needed(n, CacheType::Hidden, block) * 2,
            blocks_needed(n, CacheType::Kv, block)
        );
        prop_assert!(blocks_needed(n + 1, CacheType::Kv, block) >= blocks_needed(n, CacheType::Kv, block));
    }

    #[test]
    fn allocate_then_free_restores_the_pool(
        total in 4u64..64,
        block in 1u64..8,
        tokens in 0u64..40,
        kv in any::<bool>(),
    ) {
        let cache_type = if kv { CacheType::Kv } else { CacheType::Hidden };
        let mut pool = BlockPool::new(total, block);
        let before = pool.free_blocks();
        if pool.allocate(7, cache_type, tokens).is_ok() {
            let released = pool.free(7);
            prop_assert_eq!(released, blocks_needed(tokens, cache_type, block));
        }
        prop_assert_eq!(pool.free_blocks(), before);
        prop_assert_eq!(pool.verify_consistency(), Ok(()));
    }

    #[test]
    fn arrivals_strictly_increase(
        n in 1usize..300,
        rate in 0.1f64..50.0,
        cv in prop::option::of(0.2f64..8.0),
        seed in any::<u64>(),
    ) {
        let process = match cv {
            None => ArrivalProcess::Poisson { rate },
            Some(cv) => ArrivalProcess::Gamma { rate, cv },
        };
        let ts = synthesize_arrivals(n, &process, seed).unwrap();
        prop_assert_eq!(ts.len(), n);
        prop_assert!(ts[0] > 0.0);
        prop_assert!(ts.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(&ts, &synthesize_arrivals(n, &process, seed).unwrap());
    }

    /// Every policy's outcome satisfies the memory constraint
    /// sum((1 - beta/2) m alpha) <= M, and beta only ever arises either
    /// from the worthwhile split or because full KV cannot fit the budget.
    #[test]
    fn outcomes_are_feasible_under_every_policy(
        inst in arb_instance(),
        budget_frac in 0.0f64..1.2,
        seed in any::<u64>(),
    ) {
        let total: u64 = inst.items.iter().map(|i| i.mem_max).sum();
        let budget = (total as f64 * budget_frac) as u64;
        for outcome in [
            inst.greedy(budget),
            inst.fcfs(budget),
            inst.random(budget, seed),
            inst.brute_force(budget).unwrap(),
        ] {
            prop_assert!(outcome.is_feasible(budget));
            let recomputed: u64 = outcome
                .selected
                .iter()
                .map(|d| {
                    let item = inst.items.iter().find(|i| i.id == d.id).unwrap();
                    let mem = if d.hidden { item.mem_max / 2 } else { item.mem_max };
                    prop_assert_eq!(mem, d.mem);
                    Ok(mem)
                })
                .collect::<Result<Vec<u64>, TestCaseError>>()?
                .into_iter()
                .sum();
            prop_assert_eq!(recomputed, outcome.memory_used);
        }
        let greedy = inst.greedy(budget);
        for d in &greedy.selected {
            let item = inst.items.iter().find(|i| i.id == d.id).unwrap();
            if d.hidden {
                let worthwhile = inst.hybrid
                    && item.pending / item.mem_max as f64
                        >= 2.0 * inst.n_tracked as f64 * inst.rho;
                prop_assert!(
                    worthwhile || item.mem_max > budget,
                    "hidden assignment without a worthwhile split or KV infeasibility"
                );
            }
        }
    }

    /// The greedy never loses to admitting requests one at a time and never
    /// beats the exhaustive oracle.
    #[test]
    fn greedy_bounded_by_oracle(inst in arb_instance(), budget_frac in 0.0f64..1.2) {
        let total: u64 = inst.items.iter().map(|i| i.mem_max).sum();
        let budget = (total as f64 * budget_frac) as u64;
        let greedy = inst.greedy(budget);
        let oracle = inst.brute_force(budget).unwrap();
        prop_assert!(greedy.objective <= oracle.objective + 1e-9);
        prop_assert!(greedy.objective >= 0.5 * oracle.objective - 1e-9);
    }
}

/// Attainment over shuffled metric rows never changes; stricter SLOs never
/// raise attainment.
#[test]
fn attainment_invariances() {
    let record = |id, arrival, emits: Vec<f64>| servesim_core::engine::RequestRecord {
        id,
        arrival_time: arrival,
        prompt_len: 4,
        output_len: emits.len() as u64,
        first_token_time: emits[0],
        token_emit_times: emits,
        preemptions: 0,
        switches: 0,
    };
    let result = servesim_core::engine::SimResult {
        schema_version: 1,
        requests: vec![
            record(0, 0.0, vec![0.4, 0.6]),
            record(1, 0.0, vec![1.4, 1.6, 3.6]),
            record(2, 0.2, vec![0.5]),
            record(3, 0.0, vec![2.5, 2.6]),
        ],
        iterations: Vec::new(),
        final_clock: 4.0,
    };
    let slo = SloSpec::new(1.0, 1.0);
    let metrics = compute_metrics(&result, &slo).unwrap();
    let base = slo_attainment(&metrics);
    let mut shuffled: Vec<RequestMetrics> = metrics.clone();
    shuffled.reverse();
    assert_eq!(slo_attainment(&shuffled), base);

    for stricter in [0.5, 0.25, 0.1] {
        let tighter = compute_metrics(&result, &SloSpec::new(stricter, 1.0)).unwrap();
        assert!(slo_attainment(&tighter) <= base);
        let tighter_tbt = compute_metrics(&result, &SloSpec::new(1.0, stricter)).unwrap();
        assert!(slo_attainment(&tighter_tbt) <= base);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// End-to-end invariants on small random workloads under every policy
    /// and cache mode: completion, token conservation, strictly increasing
    /// emit times, and no hidden assignments in KV-only mode.
    #[test]
    fn small_simulations_uphold_engine_invariants(
        raw in prop::collection::vec((0.0f64..2.0, 1u64..40, 1u64..12), 1..8),
        policy_pick in 0u8..3,
        kv_only in any::<bool>(),
        tight_pool in any::<bool>(),
    ) {
        let specs: Vec<RequestSpec> = raw
            .iter()
            .enumerate()
            .map(|(i, &(arrival, prompt, output))| RequestSpec {
                id: i as u64,
                arrival_time: arrival,
                prompt_len: prompt,
                output_len: output,
            })
            .collect();
        let workload = Workload::new(specs).unwrap();
        let block_size = 4;
        // Tight pools exercise preemption and hidden admission; the pool
        // still has to hold the largest request as full KV.
        let max_kv = workload
            .requests
            .iter()
            .map(|r| blocks_needed(r.prompt_len + r.output_len, CacheType::Kv, block_size))
            .max()
            .unwrap();
        let cfg = SimConfig {
            block_size,
            total_blocks: if tight_pool { max_kv + 2 } else { 4 * max_kv + 16 },
            scheduler_policy: match policy_pick {
                0 => SchedulerPolicy::Adaptive,
                1 => SchedulerPolicy::Fcfs,
                _ => SchedulerPolicy::Random,
            },
            cache_mode: if kv_only { CacheMode::KvOnly } else { CacheMode::Hybrid },
            cost_model: servesim_core::cost::CostCoefficients {
                c0: 0.005,
                ..Default::default()
            },
            ..SimConfig::default()
        };

        let result = run(&workload, &cfg).unwrap();
        prop_assert_eq!(result.requests.len(), workload.len());
        for r in &result.requests {
            prop_assert_eq!(r.token_emit_times.len() as u64, r.output_len);
            prop_assert!(r.first_token_time > r.arrival_time);
            prop_assert!(r.token_emit_times.windows(2).all(|w| w[0] < w[1]));
        }
        if kv_only {
            prop_assert!(result
                .iterations
                .iter()
                .all(|l| l.batch.iter().all(|b| !b.hidden)));
        }
        // Clock monotone across the log.
        prop_assert!(result
            .iterations
            .windows(2)
            .all(|w| w[0].clock_after <= w[1].clock_after));
    }
}
