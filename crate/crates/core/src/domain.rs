//! Core domain types shared by the pool, scheduler, and engine.
//!
//! Memory is accounted in abstract units: one unit is one cached vector
//! (K, V, or hidden) for one token position, folded across all model
//! layers. A KV-cached token therefore costs 2 units, a hidden-cached
//! token costs 1. Blocks hold `block_size` units of a single vector kind.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Unique identifier of a served request within a workload.
pub type RequestId = u64;

#[derive(Debug, Error, PartialEq)]
pub enum DomainError {
    #[error("cache type None holds no memory; a running request must be KV or Hidden")]
    NoCacheType,
}

/// Which cache layout a request currently uses.
///
/// Waiting requests hold no cache (`None`); running requests hold either
/// full key/value vectors or the half-size input hidden vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheType {
    None,
    Kv,
    Hidden,
}

/// Vector kind stored in a single pool block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VectorKind {
    K,
    V,
    H,
}

/// An incoming request as described by the workload.
///
/// `output_len` is the ground-truth generation length; the scheduler never
/// sees it and learns a request is done only when the final token emits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RequestSpec {
    pub id: RequestId,
    /// Arrival instant on the simulated clock, seconds.
    pub arrival_time: f64,
    pub prompt_len: u64,
    pub output_len: u64,
}

/// Lifecycle phase of a request inside the simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Waiting,
    Running,
    Finished,
}

/// Mutable per-request state tracked by the engine.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RequestState {
    pub spec: RequestSpec,
    pub phase: Phase,
    pub cache_type: CacheType,
    /// Output tokens emitted so far, cumulative across preemptions.
    pub tokens_generated: u64,
    /// Prompt length seen by the next prefill. After a preemption or a
    /// cache-type switch this grows to prompt + tokens generated so far,
    /// since the resume prefill reprocesses the whole sequence.
    pub effective_prompt_len: u64,
    pub first_token_time: Option<f64>,
    pub last_token_time: Option<f64>,
    pub token_emit_times: Vec<f64>,
    /// Cache type requested by the most recent switch, informational: the
    /// schedule that readmits the request decides the actual type.
    pub required_cache: Option<CacheType>,
    pub preemptions: u64,
    pub switches: u64,
}

impl RequestState {
    pub fn new(spec: RequestSpec) -> Self {
        RequestState {
            effective_prompt_len: spec.prompt_len,
            spec,
            phase: Phase::Waiting,
            cache_type: CacheType::None,
            tokens_generated: 0,
            first_token_time: None,
            last_token_time: None,
            token_emit_times: Vec::new(),
            required_cache: None,
            preemptions: 0,
            switches: 0,
        }
    }

    /// Tokens resident in cache while running: prompt plus every generated
    /// token. Generated tokens folded into `effective_prompt_len` by a
    /// preemption are not double counted.
    pub fn seq_len(&self) -> u64 {
        self.spec.prompt_len + self.tokens_generated
    }

    /// KV memory requirement of the sequence including the token produced
    /// by the next iteration. This is the m-value the scheduler tracks.
    pub fn mem_max(&self) -> u64 {
        token_memory_units(self.seq_len() + 1, CacheType::Kv).expect("KV is a valid cache type")
    }

    pub fn is_finished(&self) -> bool {
        self.tokens_generated == self.spec.output_len
    }
}

/// Latency targets a request must meet to count as served.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SloSpec {
    /// Time-to-first-token target, seconds.
    pub ttft_slo: f64,
    /// Per-request 99th-percentile time-between-tokens target, seconds.
    pub p99_tbt_slo: f64,
}

impl SloSpec {
    pub fn new(ttft_slo: f64, p99_tbt_slo: f64) -> Self {
        SloSpec { ttft_slo, p99_tbt_slo }
    }
}

/// Memory units consumed by a sequence of `seq_len` cached tokens.
///
/// KV stores one K and one V vector per token (2 units); hidden stores a
/// single input vector per token (1 unit), half the KV footprint.
pub fn token_memory_units(seq_len: u64, cache_type: CacheType) -> Result<u64, DomainError> {
    match cache_type {
        CacheType::Kv => Ok(2 * seq_len),
        CacheType::Hidden => Ok(seq_len),
        CacheType::None => Err(DomainError::NoCacheType),
    }
}

/// Pool blocks needed to store `seq_len` tokens of the given cache type.
///
/// K and V vectors live in separate blocks, so KV needs two block chains.
/// `CacheType::None` holds no cache and needs no blocks.
pub fn blocks_needed(seq_len: u64, cache_type: CacheType, block_size: u64) -> u64 {
    assert!(block_size >= 1, "block_size must be at least 1");
    let per_kind = seq_len.div_ceil(block_size);
    match cache_type {
        CacheType::Kv => 2 * per_kind,
        CacheType::Hidden => per_kind,
        CacheType::None => 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn memory_units_per_cache_type() {
        assert_eq!(token_memory_units(100, CacheType::Kv), Ok(200));
        assert_eq!(token_memory_units(100, CacheType::Hidden), Ok(100));
        assert_eq!(token_memory_units(0, CacheType::Kv), Ok(0));
        assert_eq!(
            token_memory_units(10, CacheType::None),
            Err(DomainError::NoCacheType)
        );
    }

    #[test]
    fn block_counts_match_pool_layout() {
        // 11 KV tokens at block size 4: three K blocks plus three V blocks.
        assert_eq!(blocks_needed(11, CacheType::Kv, 4), 6);
        // 14 hidden tokens at block size 4.
        assert_eq!(blocks_needed(14, CacheType::Hidden, 4), 4);
        assert_eq!(blocks_needed(0, CacheType::Hidden, 4), 0);
        assert_eq!(blocks_needed(5, CacheType::None, 4), 0);
    }

    #[test]
    fn hidden_is_half_of_kv() {
        for n in 0..200 {
            assert_eq!(
                token_memory_units(n, CacheType::Hidden).unwrap() * 2,
                token_memory_units(n, CacheType::Kv).unwrap()
            );
            assert_eq!(
                blocks_needed(n, CacheType::Hidden, 7) * 2,
                blocks_needed(n, CacheType::Kv, 7)
            );
        }
    }

    #[test]
    fn blocks_needed_monotone_in_seq_len() {
        for b in [1, 3, 16] {
            let mut prev = 0;
            for n in 0..100 {
                let cur = blocks_needed(n, CacheType::Kv, b);
                assert!(cur >= prev);
                prev = cur;
            }
        }
    }

    #[test]
    fn state_tracks_resident_tokens_across_preemption() {
        let mut st = RequestState::new(RequestSpec {
            id: 1,
            arrival_time: 0.0,
            prompt_len: 100,
            output_len: 50,
        });
        st.tokens_generated = 5;
        // Fold generated tokens into the prompt the way a preemption does.
        st.effective_prompt_len = st.spec.prompt_len + st.tokens_generated;
        assert_eq!(st.effective_prompt_len, 105);
        assert_eq!(st.seq_len(), 105);
        assert_eq!(st.mem_max(), 2 * 106);
    }
}
