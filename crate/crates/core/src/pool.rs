//! Unified block-wise memory pool.
//!
//! A single pool of fixed-size blocks backs every cache in the simulation.
//! Each block stores vectors of exactly one kind (K, V, or hidden) for one
//! request, so K, V, and hidden caches space-share the same free list and a
//! request's blocks need not be contiguous. Free blocks are handed out
//! lowest-id-first, which keeps layouts reproducible.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::domain::{blocks_needed, CacheType, RequestId, VectorKind};

pub type BlockId = u64;

#[derive(Debug, Error, PartialEq)]
pub enum PoolError {
    #[error("request {0} already holds a cache map")]
    AlreadyAllocated(RequestId),
    #[error("request {0} holds no cache map")]
    NoSuchMap(RequestId),
    #[error("out of memory: need {needed} free blocks, have {free}")]
    OutOfMemory { needed: u64, free: u64 },
    #[error("cache type None cannot be allocated")]
    NoCacheType,
}

/// Ordered block list for one vector kind: (block id, tokens filled).
/// Every block except possibly the last is filled to the block size.
type KindChain = Vec<(BlockId, u64)>;

/// Per-request mapping from token positions to pool blocks.
#[derive(Debug, Clone, Serialize)]
pub struct CacheMap {
    pub request: RequestId,
    pub cache_type: CacheType,
    k_blocks: KindChain,
    v_blocks: KindChain,
    h_blocks: KindChain,
    pub total_tokens: u64,
}

impl CacheMap {
    fn new(request: RequestId, cache_type: CacheType) -> Self {
        CacheMap {
            request,
            cache_type,
            k_blocks: Vec::new(),
            v_blocks: Vec::new(),
            h_blocks: Vec::new(),
            total_tokens: 0,
        }
    }

    pub fn chain(&self, kind: VectorKind) -> &[(BlockId, u64)] {
        match kind {
            VectorKind::K => &self.k_blocks,
            VectorKind::V => &self.v_blocks,
            VectorKind::H => &self.h_blocks,
        }
    }

    pub fn block_count(&self) -> u64 {
        (self.k_blocks.len() + self.v_blocks.len() + self.h_blocks.len()) as u64
    }

    fn chains_mut(&mut self) -> Vec<(&mut KindChain, VectorKind)> {
        match self.cache_type {
            CacheType::Kv => vec![
                (&mut self.k_blocks, VectorKind::K),
                (&mut self.v_blocks, VectorKind::V),
            ],
            CacheType::Hidden => vec![(&mut self.h_blocks, VectorKind::H)],
            CacheType::None => vec![],
        }
    }
}

/// The pool itself: a free set plus an owner record per live block.
#[derive(Debug, Clone)]
pub struct BlockPool {
    total_blocks: u64,
    block_size: u64,
    free: BTreeSet<BlockId>,
    owner: BTreeMap<BlockId, (RequestId, VectorKind)>,
    maps: BTreeMap<RequestId, CacheMap>,
}

impl BlockPool {
    pub fn new(total_blocks: u64, block_size: u64) -> Self {
        assert!(total_blocks >= 1 && block_size >= 1);
        BlockPool {
            total_blocks,
            block_size,
            free: (0..total_blocks).collect(),
            owner: BTreeMap::new(),
            maps: BTreeMap::new(),
        }
    }

    pub fn total_blocks(&self) -> u64 {
        self.total_blocks
    }

    pub fn block_size(&self) -> u64 {
        self.block_size
    }

    pub fn free_blocks(&self) -> u64 {
        self.free.len() as u64
    }

    /// Pool capacity in memory units (one unit per token vector).
    pub fn capacity_units(&self) -> u64 {
        self.total_blocks * self.block_size
    }

    pub fn map(&self, request: RequestId) -> Option<&CacheMap> {
        self.maps.get(&request)
    }

    pub fn maps(&self) -> impl Iterator<Item = &CacheMap> {
        self.maps.values()
    }

    /// All-or-nothing allocation of a fresh cache map covering `token_count`
    /// tokens. On `OutOfMemory` the pool is left untouched.
    pub fn allocate(
        &mut self,
        request: RequestId,
        cache_type: CacheType,
        token_count: u64,
    ) -> Result<&CacheMap, PoolError> {
        if cache_type == CacheType::None {
            return Err(PoolError::NoCacheType);
        }
        if self.maps.contains_key(&request) {
            return Err(PoolError::AlreadyAllocated(request));
        }
        let needed = blocks_needed(token_count, cache_type, self.block_size);
        if needed > self.free_blocks() {
            return Err(PoolError::OutOfMemory {
                needed,
                free: self.free_blocks(),
            });
        }
        let mut map = CacheMap::new(request, cache_type);
        self.fill_chains(&mut map, token_count);
        map.total_tokens = token_count;
        self.maps.insert(request, map);
        Ok(&self.maps[&request])
    }

    /// Grow an existing map by `extra_tokens`. New blocks are taken only
    /// when the last block per kind is full; KV grows K and V in lockstep.
    /// On `OutOfMemory` the pool is left untouched.
    pub fn extend(&mut self, request: RequestId, extra_tokens: u64) -> Result<(), PoolError> {
        let map = self.maps.get(&request).ok_or(PoolError::NoSuchMap(request))?;
        let new_total = map.total_tokens + extra_tokens;
        let extra_blocks = blocks_needed(new_total, map.cache_type, self.block_size)
            - blocks_needed(map.total_tokens, map.cache_type, self.block_size);
        if extra_blocks > self.free_blocks() {
            return Err(PoolError::OutOfMemory {
                needed: extra_blocks,
                free: self.free_blocks(),
            });
        }
        let mut map = self.maps.remove(&request).expect("map exists");
        self.fill_chains(&mut map, extra_tokens);
        map.total_tokens = new_total;
        self.maps.insert(request, map);
        Ok(())
    }

    /// Return every block of `request` to the free set. Unknown requests are
    /// a no-op so freeing is idempotent. Returns the number released.
    pub fn free(&mut self, request: RequestId) -> u64 {
        let Some(map) = self.maps.remove(&request) else {
            return 0;
        };
        let mut released = 0;
        for chain in [&map.k_blocks, &map.v_blocks, &map.h_blocks] {
            for &(block, _) in chain {
                self.owner.remove(&block);
                self.free.insert(block);
                released += 1;
            }
        }
        released
    }

    /// Feasibility probe: would the summed block demand fit the free set?
    pub fn can_fit(&self, demands: &[(CacheType, u64)]) -> bool {
        let needed: u64 = demands
            .iter()
            .map(|&(ty, tokens)| blocks_needed(tokens, ty, self.block_size))
            .sum();
        needed <= self.free_blocks()
    }

    /// Debug dump of live ownership: block id -> (request, vector kind).
    pub fn dump(&self) -> serde_json::Value {
        let owned: BTreeMap<String, serde_json::Value> = self
            .owner
            .iter()
            .map(|(block, (req, kind))| {
                (
                    block.to_string(),
                    serde_json::json!({ "request": req, "kind": format!("{kind:?}") }),
                )
            })
            .collect();
        serde_json::json!({
            "total_blocks": self.total_blocks,
            "block_size": self.block_size,
            "free": self.free.iter().collect::<Vec<_>>(),
            "owned": owned,
        })
    }

    /// Append capacity for `extra_tokens` to every chain of `map`, topping
    /// up partially filled tail blocks before claiming free ones. Callers
    /// must have verified the block demand fits.
    fn fill_chains(&mut self, map: &mut CacheMap, extra_tokens: u64) {
        let block_size = self.block_size;
        let request = map.request;
        for (chain, kind) in map.chains_mut() {
            let mut remaining = extra_tokens;
            if let Some(last) = chain.last_mut() {
                let room = block_size - last.1;
                let take = room.min(remaining);
                last.1 += take;
                remaining -= take;
            }
            while remaining > 0 {
                let block = *self
                    .free
                    .iter()
                    .next()
                    .expect("caller checked free block count");
                self.free.remove(&block);
                self.owner.insert(block, (request, kind));
                let take = block_size.min(remaining);
                chain.push((block, take));
                remaining -= take;
            }
        }
    }

    /// Full-scan consistency check: conservation, no aliasing, fill shape,
    /// and K/V symmetry. Used by tests and the engine's debug assertions.
    pub fn verify_consistency(&self) -> Result<(), String> {
        if self.free.len() as u64 + self.owner.len() as u64 != self.total_blocks {
            return Err(format!(
                "conservation violated: {} free + {} owned != {} total",
                self.free.len(),
                self.owner.len(),
                self.total_blocks
            ));
        }
        let mut seen: BTreeSet<BlockId> = BTreeSet::new();
        for map in self.maps.values() {
            for (kind, chain) in [
                (VectorKind::K, &map.k_blocks),
                (VectorKind::V, &map.v_blocks),
                (VectorKind::H, &map.h_blocks),
            ] {
                for (idx, &(block, filled)) in chain.iter().enumerate() {
                    if self.free.contains(&block) {
                        return Err(format!("block {block} both free and mapped"));
                    }
                    if !seen.insert(block) {
                        return Err(format!("block {block} aliased by two chains"));
                    }
                    if self.owner.get(&block) != Some(&(map.request, kind)) {
                        return Err(format!("block {block} owner record mismatch"));
                    }
                    let is_last = idx + 1 == chain.len();
                    if !is_last && filled != self.block_size {
                        return Err(format!("non-tail block {block} not full"));
                    }
                    if filled == 0 || filled > self.block_size {
                        return Err(format!("block {block} fill {filled} out of range"));
                    }
                }
            }
            let expect = blocks_needed(map.total_tokens, map.cache_type, self.block_size);
            if map.block_count() != expect {
                return Err(format!(
                    "request {} holds {} blocks, expected {expect}",
                    map.request,
                    map.block_count()
                ));
            }
            if map.cache_type == CacheType::Kv {
                if map.k_blocks.len() != map.v_blocks.len() {
                    return Err(format!("request {} K/V chain lengths differ", map.request));
                }
                let k_fill: u64 = map.k_blocks.iter().map(|&(_, f)| f).sum();
                let v_fill: u64 = map.v_blocks.iter().map(|&(_, f)| f).sum();
                if k_fill != map.total_tokens || v_fill != map.total_tokens {
                    return Err(format!("request {} K/V fills diverge", map.request));
                }
            }
        }
        if seen.len() != self.owner.len() {
            return Err("owner records exist for unmapped blocks".into());
        }
        Ok(())
    }
}
