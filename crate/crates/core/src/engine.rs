//! Discrete-event serving loop.
//!
//! Each step admits due arrivals, snapshots runtime state, decides the
//! iteration type, solves the batch schedule under the configured policy,
//! applies it to the pool (allocations, extensions, preemptions, cache
//! switches), advances the clock by the modeled iteration latency, and
//! emits one token per executed request. Requests arrive and leave the
//! batch only at iteration boundaries.
//!
//! The scheduler reasons in memory units while the pool stores blocks, so
//! every applied schedule is re-validated at block granularity; selected
//! requests that no longer fit after rounding are dropped from the batch
//! in reverse acceptance order.

use std::collections::{BTreeMap, HashMap, VecDeque};

use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, SchedulerPolicy, SimConfig};
use crate::cost::{iteration_latency, BatchDescriptor, IterationKind};
use crate::domain::{
    blocks_needed, token_memory_units, CacheType, Phase, RequestId, RequestSpec, RequestState,
    SloSpec,
};
use crate::pool::BlockPool;
use crate::scheduler::{
    decide_iteration_type, track_runtime, RuntimeSnapshot, ScheduleOutcome, SchedulingInstance,
};
use crate::workload::{mix_seed, Workload};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("workload is empty")]
    EmptyWorkload,
    #[error("request {id}: prompt {prompt_len} + output {output_len} exceeds context limit {context_limit}")]
    ContextOverflow {
        id: RequestId,
        prompt_len: u64,
        output_len: u64,
        context_limit: u64,
    },
    #[error("request {id} needs {needed} blocks as KV cache but the pool holds {total}")]
    RequestTooLarge {
        id: RequestId,
        needed: u64,
        total: u64,
    },
    #[error("simulation exceeded {0} iterations without finishing")]
    NonTermination(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LogKind {
    Prefill,
    Decode,
    Idle,
}

/// One executed request in an iteration log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BatchEntry {
    pub id: RequestId,
    /// beta: ran on hidden cache.
    pub hidden: bool,
    /// Scheduling value at selection time.
    pub g: f64,
}

/// Per-iteration record, one JSON line in the iteration log stream.
#[derive(Debug, Clone, Serialize)]
pub struct IterationLog {
    pub e: u64,
    pub kind: LogKind,
    /// Candidate set size the scheduler saw.
    pub u_size: usize,
    /// Memory budget in units.
    pub budget_units: u64,
    /// Executed batch in acceptance order.
    pub batch: Vec<BatchEntry>,
    pub latency: f64,
    pub tokens_emitted: u64,
    pub preempted: Vec<RequestId>,
    pub switched: Vec<RequestId>,
    pub free_blocks_after: u64,
    pub clock_after: f64,
}

/// Final per-request record.
#[derive(Debug, Clone, Serialize)]
pub struct RequestRecord {
    pub id: RequestId,
    pub arrival_time: f64,
    pub prompt_len: u64,
    pub output_len: u64,
    pub first_token_time: f64,
    pub token_emit_times: Vec<f64>,
    pub preemptions: u64,
    pub switches: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimResult {
    pub schema_version: u32,
    pub requests: Vec<RequestRecord>,
    pub iterations: Vec<IterationLog>,
    pub final_clock: f64,
}

/// Live simulation state.
pub struct SimState {
    pub clock: f64,
    pub iteration: u64,
    waiting: VecDeque<RequestId>,
    running: Vec<RequestId>,
    pool: BlockPool,
    pending_arrivals: VecDeque<RequestSpec>,
    states: BTreeMap<RequestId, RequestState>,
    finished: usize,
    total: usize,
    slo: SloSpec,
}

impl SimState {
    pub fn new(workload: &Workload, config: &SimConfig) -> Result<Self, EngineError> {
        config.validate()?;
        if workload.is_empty() {
            return Err(EngineError::EmptyWorkload);
        }
        for r in &workload.requests {
            if r.prompt_len + r.output_len > config.context_limit {
                return Err(EngineError::ContextOverflow {
                    id: r.id,
                    prompt_len: r.prompt_len,
                    output_len: r.output_len,
                    context_limit: config.context_limit,
                });
            }
            // Every request must be KV-storable at its longest, otherwise it
            // could stall the queue forever.
            let needed = blocks_needed(r.prompt_len + r.output_len, CacheType::Kv, config.block_size);
            if needed > config.total_blocks {
                return Err(EngineError::RequestTooLarge {
                    id: r.id,
                    needed,
                    total: config.total_blocks,
                });
            }
        }
        Ok(SimState {
            clock: 0.0,
            iteration: 0,
            waiting: VecDeque::new(),
            running: Vec::new(),
            pool: BlockPool::new(config.total_blocks, config.block_size),
            pending_arrivals: workload.requests.iter().copied().collect(),
            states: BTreeMap::new(),
            finished: 0,
            total: workload.len(),
            slo: config.slo_spec()?,
        })
    }

    pub fn is_done(&self) -> bool {
        self.finished == self.total
    }

    pub fn pool(&self) -> &BlockPool {
        &self.pool
    }

    pub fn state(&self, id: RequestId) -> Option<&RequestState> {
        self.states.get(&id)
    }

    pub fn waiting_ids(&self) -> impl Iterator<Item = RequestId> + '_ {
        self.waiting.iter().copied()
    }

    pub fn running_ids(&self) -> &[RequestId] {
        &self.running
    }

    fn admit_arrivals(&mut self) {
        while let Some(next) = self.pending_arrivals.front() {
            if next.arrival_time > self.clock {
                break;
            }
            let spec = self.pending_arrivals.pop_front().expect("peeked");
            self.states.insert(spec.id, RequestState::new(spec));
            self.waiting.push_back(spec.id);
        }
    }

    /// Evict a running request: its cache is discarded and it rejoins the
    /// waiting queue, to be resumed later by a prefill over its prompt plus
    /// everything it generated so far. Pending time keeps accruing from the
    /// last emitted token.
    pub fn preempt(&mut self, id: RequestId) {
        self.pool.free(id);
        self.running.retain(|&r| r != id);
        let st = self.states.get_mut(&id).expect("request exists");
        st.effective_prompt_len = st.spec.prompt_len + st.tokens_generated;
        st.phase = Phase::Waiting;
        st.cache_type = CacheType::None;
        st.preemptions += 1;
        self.waiting.push_back(id);
    }

    /// A scheduled cache-type change: discard the cache like a preemption
    /// and record the requested type. The schedule that readmits the
    /// request decides the actual type (latest wins); the directive is kept
    /// for the log.
    pub fn handle_cache_switch(&mut self, id: RequestId, new_type: CacheType) {
        self.preempt(id);
        let st = self.states.get_mut(&id).expect("request exists");
        st.preemptions -= 1;
        st.switches += 1;
        st.required_cache = Some(new_type);
    }

    fn snapshot(&self, rho: f64) -> RuntimeSnapshot {
        let waiting: Vec<&RequestState> = self.waiting.iter().map(|id| &self.states[id]).collect();
        let running: Vec<&RequestState> = self.running.iter().map(|id| &self.states[id]).collect();
        track_runtime(
            &waiting,
            &running,
            self.clock,
            &self.slo,
            rho,
            self.pool.capacity_units(),
        )
    }

    /// Run one iteration. Requires at least one unfinished request.
    pub fn step(&mut self, config: &SimConfig) -> IterationLog {
        assert!(!self.is_done(), "step called on a finished simulation");
        self.iteration += 1;
        let e = self.iteration;
        self.admit_arrivals();

        if self.waiting.is_empty() && self.running.is_empty() {
            // Nothing resident: jump to the next arrival.
            let next = self
                .pending_arrivals
                .front()
                .expect("unfinished requests must be queued or pending");
            self.clock = next.arrival_time;
            self.admit_arrivals();
            return IterationLog {
                e,
                kind: LogKind::Idle,
                u_size: 0,
                budget_units: 0,
                batch: Vec::new(),
                latency: 0.0,
                tokens_emitted: 0,
                preempted: Vec::new(),
                switched: Vec::new(),
                free_blocks_after: self.pool.free_blocks(),
                clock_after: self.clock,
            };
        }

        let snapshot = self.snapshot(config.rho());
        let w_pending: Vec<f64> = snapshot.waiting.iter().map(|c| c.pending).collect();
        let r_pending: Vec<f64> = snapshot.running.iter().map(|c| c.pending).collect();
        let mut kind = decide_iteration_type(&w_pending, &r_pending)
            .expect("a request is queued, so the iteration type is defined");

        let solve = |kind: IterationKind| {
            let budget = snapshot.budget(kind);
            let instance = SchedulingInstance::from_snapshot(
                &snapshot,
                kind,
                config.fallback_mode,
                config.hybrid_allowed(),
            );
            let outcome = match config.scheduler_policy {
                SchedulerPolicy::Adaptive => instance.greedy(budget),
                SchedulerPolicy::Fcfs => instance.fcfs(budget),
                SchedulerPolicy::Random => instance.random(budget, mix_seed(config.rng_seed, e)),
            };
            assert!(
                outcome.is_feasible(budget),
                "iteration {e}: schedule uses {} units over budget {budget}",
                outcome.memory_used
            );
            if !config.hybrid_allowed() {
                assert!(
                    outcome.selected.iter().all(|d| !d.hidden),
                    "KV-only mode must never assign hidden cache"
                );
            }
            (instance, budget, outcome)
        };

        let (mut instance, mut budget, mut outcome) = solve(kind);
        let mut planned = match kind {
            IterationKind::Prefill => Some(self.plan_prefill(&outcome, config)),
            IterationKind::Decode => None,
        };
        // A prefill that admits nothing would stall the running queue
        // while waiting pendings only grow; run a decode instead so the
        // system keeps making progress.
        if kind == IterationKind::Prefill
            && planned.as_ref().is_some_and(Vec::is_empty)
            && !self.running.is_empty()
        {
            kind = IterationKind::Decode;
            (instance, budget, outcome) = solve(kind);
            planned = None;
        }

        let (batch, preempted, switched) = match kind {
            IterationKind::Prefill => {
                let admitted = planned.expect("planned above");
                self.commit_prefill(&admitted);
                (admitted, Vec::new(), Vec::new())
            }
            IterationKind::Decode => self.apply_decode(&outcome, config),
        };

        let descriptor = self.describe_batch(kind, &batch);
        let latency = iteration_latency(&descriptor, &config.cost_model);
        self.clock += latency;

        // Emit one token per executed request at the new clock.
        let mut finished_now = Vec::new();
        for entry in &batch {
            let st = self.states.get_mut(&entry.id).expect("request exists");
            st.tokens_generated += 1;
            st.token_emit_times.push(self.clock);
            st.first_token_time.get_or_insert(self.clock);
            st.last_token_time = Some(self.clock);
            if st.is_finished() {
                finished_now.push(entry.id);
            }
        }
        for id in finished_now {
            self.pool.free(id);
            self.running.retain(|&r| r != id);
            self.states.get_mut(&id).expect("request exists").phase = Phase::Finished;
            self.finished += 1;
        }

        self.assert_memory_accounting();

        IterationLog {
            e,
            kind: match kind {
                IterationKind::Prefill => LogKind::Prefill,
                IterationKind::Decode => LogKind::Decode,
            },
            u_size: instance.items.len(),
            budget_units: budget,
            tokens_emitted: batch.len() as u64,
            batch,
            latency,
            preempted,
            switched,
            free_blocks_after: self.pool.free_blocks(),
            clock_after: self.clock,
        }
    }

    /// Resolve a prefill schedule to the admitted batch: unit feasibility
    /// held, but block rounding may still overflow the free set, in which
    /// case requests drop from the tail (lowest marginal gain) until the
    /// batch fits.
    fn plan_prefill(&self, outcome: &ScheduleOutcome, config: &SimConfig) -> Vec<BatchEntry> {
        let mut admitted: Vec<BatchEntry> = Vec::new();
        let mut needed_blocks: Vec<u64> = Vec::new();
        let mut total_blocks_needed = 0u64;
        for d in &outcome.selected {
            let st = &self.states[&d.id];
            let cache_type = if d.hidden { CacheType::Hidden } else { CacheType::Kv };
            let blocks = blocks_needed(st.effective_prompt_len + 1, cache_type, config.block_size);
            admitted.push(BatchEntry { id: d.id, hidden: d.hidden, g: d.value });
            needed_blocks.push(blocks);
            total_blocks_needed += blocks;
        }
        while total_blocks_needed > self.pool.free_blocks() {
            admitted.pop().expect("demand shrinks to zero before free blocks do");
            total_blocks_needed -= needed_blocks.pop().expect("parallel to admitted");
        }
        admitted
    }

    /// Admit the planned batch: allocate a cache covering the effective
    /// prompt plus the first emitted token and move each request to the
    /// running queue.
    fn commit_prefill(&mut self, admitted: &[BatchEntry]) {
        for entry in admitted {
            let st = self.states.get_mut(&entry.id).expect("request exists");
            let cache_type = if entry.hidden { CacheType::Hidden } else { CacheType::Kv };
            st.phase = Phase::Running;
            st.cache_type = cache_type;
            st.required_cache = None;
            let tokens = st.effective_prompt_len + 1;
            self.pool
                .allocate(entry.id, cache_type, tokens)
                .expect("block-granularity check guarantees the allocation");
            self.waiting.retain(|&id| id != entry.id);
            self.running.push(entry.id);
        }
    }

    /// Apply a decode schedule to the running queue: unselected requests
    /// are preempted, selected ones with a changed cache type are switched
    /// (discard and recompute later), and survivors extend by one token.
    fn apply_decode(
        &mut self,
        outcome: &ScheduleOutcome,
        config: &SimConfig,
    ) -> (Vec<BatchEntry>, Vec<RequestId>, Vec<RequestId>) {
        let decisions: HashMap<RequestId, (bool, f64)> = outcome
            .selected
            .iter()
            .map(|d| (d.id, (d.hidden, d.value)))
            .collect();
        let mut to_preempt = Vec::new();
        let mut to_switch = Vec::new();
        for &id in &self.running {
            match decisions.get(&id) {
                None => to_preempt.push(id),
                Some(&(hidden, _)) => {
                    let target = if hidden { CacheType::Hidden } else { CacheType::Kv };
                    if self.states[&id].cache_type != target {
                        to_switch.push((id, target));
                    }
                }
            }
        }
        for &id in &to_preempt {
            self.preempt(id);
        }
        for &(id, target) in &to_switch {
            self.handle_cache_switch(id, target);
        }
        let switched: Vec<RequestId> = to_switch.iter().map(|&(id, _)| id).collect();

        // Survivors in acceptance order, then the block-granularity check.
        let mut survivors: Vec<BatchEntry> = outcome
            .selected
            .iter()
            .filter(|d| !switched.contains(&d.id))
            .map(|d| BatchEntry { id: d.id, hidden: d.hidden, g: d.value })
            .collect();
        let extra = |pool: &BlockPool, id: RequestId| {
            let map = pool.map(id).expect("running requests own a map");
            blocks_needed(map.total_tokens + 1, map.cache_type, config.block_size)
                - blocks_needed(map.total_tokens, map.cache_type, config.block_size)
        };
        let mut total_extra: u64 = survivors.iter().map(|b| extra(&self.pool, b.id)).sum();
        let mut preempted = to_preempt;
        while total_extra > self.pool.free_blocks() {
            let dropped = survivors.pop().expect("demand shrinks to zero before free blocks do");
            total_extra -= extra(&self.pool, dropped.id);
            self.preempt(dropped.id);
            preempted.push(dropped.id);
        }
        for entry in &survivors {
            self.pool
                .extend(entry.id, 1)
                .expect("block-granularity check guarantees the extension");
        }
        (survivors, preempted, switched)
    }

    fn describe_batch(&self, kind: IterationKind, batch: &[BatchEntry]) -> BatchDescriptor {
        let mut d = BatchDescriptor::empty(kind);
        for entry in batch {
            let map = self.pool.map(entry.id).expect("batch members own a map");
            match kind {
                IterationKind::Prefill => {
                    d.prefill_tokens += self.states[&entry.id].effective_prompt_len;
                }
                IterationKind::Decode => {
                    d.decode_requests += 1;
                    // Reprojection applies only when decoding from cached
                    // hidden vectors; a prefill recomputes K/V from its own
                    // inputs.
                    if map.cache_type == CacheType::Hidden {
                        d.hidden_units +=
                            token_memory_units(map.total_tokens, CacheType::Hidden).expect("hidden");
                    }
                }
            }
            d.context_tokens += map.total_tokens;
        }
        d
    }

    /// Units held by running requests must match their resident sequence
    /// lengths, block-rounded; the pool must conserve blocks.
    fn assert_memory_accounting(&self) {
        for &id in &self.running {
            let st = &self.states[&id];
            let map = self.pool.map(id).expect("running requests own a map");
            assert_eq!(
                map.total_tokens,
                st.spec.prompt_len + st.tokens_generated,
                "request {id}: cached tokens diverge from resident sequence"
            );
        }
        debug_assert_eq!(self.pool.verify_consistency(), Ok(()));
        // Conservation across queues.
        let arrived = self.states.len();
        debug_assert_eq!(
            self.waiting.len() + self.running.len() + self.finished,
            arrived,
            "request conservation violated"
        );
    }

    fn into_result(self, iterations: Vec<IterationLog>) -> SimResult {
        let requests = self
            .states
            .into_values()
            .map(|st| RequestRecord {
                id: st.spec.id,
                arrival_time: st.spec.arrival_time,
                prompt_len: st.spec.prompt_len,
                output_len: st.spec.output_len,
                first_token_time: st.first_token_time.expect("finished requests emitted"),
                token_emit_times: st.token_emit_times,
                preemptions: st.preemptions,
                switches: st.switches,
            })
            .collect();
        SimResult {
            schema_version: crate::config::SCHEMA_VERSION,
            requests,
            final_clock: iterations.last().map_or(0.0, |l| l.clock_after),
            iterations,
        }
    }
}

/// Run a workload to completion. Deterministic for a fixed workload,
/// config, and seed.
pub fn run(workload: &Workload, config: &SimConfig) -> Result<SimResult, EngineError> {
    let mut state = SimState::new(workload, config)?;
    let mut logs = Vec::new();
    while !state.is_done() {
        if state.iteration >= config.max_iterations {
            return Err(EngineError::NonTermination(config.max_iterations));
        }
        logs.push(state.step(config));
    }
    Ok(state.into_result(logs))
}
