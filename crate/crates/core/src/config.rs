//! Simulation configuration and its JSON form.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::CostCoefficients;
use crate::domain::SloSpec;
use crate::scheduler::FallbackMode;
use crate::workload::WorkloadSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("unknown slo preset {0:?}")]
    UnknownPreset(String),
}

/// Which policy decides the per-iteration batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerPolicy {
    Adaptive,
    Fcfs,
    Random,
}

/// Whether the hidden cache may be assigned at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheMode {
    Hybrid,
    KvOnly,
}

/// SLO section: either an inline pair or a named preset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SloSection {
    Preset { preset: String },
    Inline(SloSpec),
}

/// Named SLO presets for a 13B-class model serving typical chat,
/// code-completion, and summarization workloads.
pub fn slo_preset(name: &str) -> Option<SloSpec> {
    match name {
        "sharegpt-13b" => Some(SloSpec::new(1.0, 1.0)),
        "humaneval-13b" => Some(SloSpec::new(0.5, 0.5)),
        "longbench-13b" => Some(SloSpec::new(4.0, 1.0)),
        _ => None,
    }
}

pub const SCHEMA_VERSION: u32 = 1;

/// Complete simulation configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub schema_version: u32,
    /// Pool size in blocks.
    pub total_blocks: u64,
    /// Tokens (vectors of one kind) per block.
    pub block_size: u64,
    pub context_limit: u64,
    pub scheduler_policy: SchedulerPolicy,
    pub cache_mode: CacheMode,
    pub slo: SloSection,
    pub fallback_mode: FallbackMode,
    pub cost_model: CostCoefficients,
    pub rng_seed: u64,
    /// Abort a run that exceeds this many iterations.
    pub max_iterations: u64,
    /// Synthetic workload description used when no trace is given or the
    /// trace carries no arrival times.
    pub workload: Option<WorkloadSpec>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            schema_version: SCHEMA_VERSION,
            total_blocks: 1024,
            block_size: 16,
            context_limit: 2048,
            scheduler_policy: SchedulerPolicy::Adaptive,
            cache_mode: CacheMode::Hybrid,
            slo: SloSection::Inline(SloSpec::new(1.0, 1.0)),
            fallback_mode: FallbackMode::default(),
            cost_model: CostCoefficients::default(),
            rng_seed: 0,
            max_iterations: 10_000_000,
            workload: Some(WorkloadSpec::default()),
        }
    }
}

impl SimConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: SimConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.total_blocks < 1 {
            return Err(ConfigError::Invalid("total_blocks must be at least 1".into()));
        }
        if self.block_size < 1 {
            return Err(ConfigError::Invalid("block_size must be at least 1".into()));
        }
        if self.context_limit < 2 {
            return Err(ConfigError::Invalid(
                "context_limit must leave room for a prompt and an output token".into(),
            ));
        }
        let c = &self.cost_model;
        if c.c0 <= 0.0 {
            return Err(ConfigError::Invalid(
                "cost_model.c0 must be positive so every iteration takes time".into(),
            ));
        }
        for (name, v) in [
            ("c_prefill", c.c_prefill),
            ("c_decode", c.c_decode),
            ("c_ctx", c.c_ctx),
            ("rho", c.rho),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(ConfigError::Invalid(format!(
                    "cost_model.{name} must be finite and non-negative"
                )));
            }
        }
        let slo = self.slo_spec()?;
        if slo.ttft_slo <= 0.0 || slo.p99_tbt_slo <= 0.0 {
            return Err(ConfigError::Invalid("slo targets must be positive".into()));
        }
        match self.fallback_mode {
            FallbackMode::NearZero(eps) if eps <= 0.0 => {
                return Err(ConfigError::Invalid("near_zero epsilon must be positive".into()));
            }
            FallbackMode::Decay(gamma) if !(0.0 < gamma && gamma <= 1.0) => {
                return Err(ConfigError::Invalid("decay factor must lie in (0, 1]".into()));
            }
            _ => {}
        }
        Ok(())
    }

    /// Resolve the SLO section to a concrete spec.
    pub fn slo_spec(&self) -> Result<SloSpec, ConfigError> {
        match &self.slo {
            SloSection::Inline(spec) => Ok(*spec),
            SloSection::Preset { preset } => {
                slo_preset(preset).ok_or_else(|| ConfigError::UnknownPreset(preset.clone()))
            }
        }
    }

    pub fn rho(&self) -> f64 {
        self.cost_model.rho
    }

    pub fn hybrid_allowed(&self) -> bool {
        self.cache_mode == CacheMode::Hybrid
    }
}
