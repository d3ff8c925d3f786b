//! Linearized iteration cost model.
//!
//! Real model execution is replaced by an affine latency model over batch
//! aggregates. The hidden-cache term is the one physically grounded piece:
//! re-deriving K/V from cached hidden vectors costs time linear in the
//! cached footprint, `rho` seconds per memory unit. The other coefficients
//! stand in for prefill compute, per-request decode overhead, and attention
//! over resident context, and are meant to be fit from measured profiles.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("calibration needs at least two samples with distinct memory sizes")]
    DegenerateSamples,
}

/// Coefficients of the latency model, all in seconds per unit of the
/// corresponding batch aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostCoefficients {
    /// Fixed per-iteration overhead.
    pub c0: f64,
    /// Per prefilled token.
    pub c_prefill: f64,
    /// Per decoding request.
    pub c_decode: f64,
    /// Per cached context token attended.
    pub c_ctx: f64,
    /// Per hidden memory unit reprojected.
    pub rho: f64,
}

impl Default for CostCoefficients {
    fn default() -> Self {
        // Anchored so a 50-request decode iteration costs about 120 ms.
        CostCoefficients {
            c0: 0.02,
            c_prefill: 1e-4,
            c_decode: 0.002,
            c_ctx: 1e-6,
            rho: 1e-5,
        }
    }
}

/// Whether an iteration runs prefills or decodes; the two never mix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterationKind {
    Prefill,
    Decode,
}

/// Aggregate description of one scheduled batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchDescriptor {
    pub kind: IterationKind,
    /// Total tokens fed through the model in a prefill iteration.
    pub prefill_tokens: u64,
    /// Requests generating one token each in a decode iteration.
    pub decode_requests: u64,
    /// Summed resident sequence lengths across the batch.
    pub context_tokens: u64,
    /// Summed hidden-cache footprint (in hidden units) being reprojected.
    pub hidden_units: u64,
}

impl BatchDescriptor {
    pub fn empty(kind: IterationKind) -> Self {
        BatchDescriptor {
            kind,
            prefill_tokens: 0,
            decode_requests: 0,
            context_tokens: 0,
            hidden_units: 0,
        }
    }
}

/// Extra latency incurred by reprojecting `m` hidden memory units.
pub fn hidden_extra_cost(m: u64, rho: f64) -> f64 {
    rho * m as f64
}

/// Simulated wall time of one iteration.
pub fn iteration_latency(b: &BatchDescriptor, c: &CostCoefficients) -> f64 {
    c.c0 + c.c_prefill * b.prefill_tokens as f64
        + c.c_decode * b.decode_requests as f64
        + c.c_ctx * b.context_tokens as f64
        + c.rho * b.hidden_units as f64
}

/// Fit `rho` from measured (footprint, extra seconds) pairs as the
/// least-squares slope through the origin.
pub fn calibrate_rho(samples: &[(u64, f64)]) -> Result<f64, CostError> {
    if samples.len() < 2 {
        return Err(CostError::DegenerateSamples);
    }
    let first = samples[0].0;
    if samples.iter().all(|&(m, _)| m == first) {
        return Err(CostError::DegenerateSamples);
    }
    let num: f64 = samples.iter().map(|&(m, t)| m as f64 * t).sum();
    let den: f64 = samples.iter().map(|&(m, _)| (m as f64).powi(2)).sum();
    Ok(num / den)
}
