//! Workload construction: request length sampling, arrival processes, and
//! trace file ingestion.
//!
//! Arrivals come from a Poisson process or a Gamma renewal process with a
//! configurable coefficient of variation; both keep the mean inter-arrival
//! at `1/rate` so burstiness varies independently of load. Lengths come
//! from simple parametric families or an empirical file, clamped to the
//! model context window.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Gamma, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{RequestId, RequestSpec};

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("trace {path} line {line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },
    #[error("trace {path} line {line}: {field} must be at least 1 (got {value})")]
    NonPositiveLength {
        path: String,
        line: u64,
        field: &'static str,
        value: i64,
    },
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("workload is empty")]
    Empty,
    #[error("duplicate request id {0}")]
    DuplicateId(RequestId),
    #[error("request {id} has negative arrival time {arrival}")]
    NegativeArrival { id: RequestId, arrival: f64 },
    #[error("request {0} has no arrival time; synthesize arrivals first")]
    MissingArrival(RequestId),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("arrival count {got} does not match row count {want}")]
    ArrivalCountMismatch { got: usize, want: usize },
}

/// Request length distribution, clamped to `[1, context_limit]` at sample
/// time. Empirical files hold one length per line and are sampled with
/// replacement.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthDistribution {
    Fixed(u64),
    Uniform { lo: u64, hi: u64 },
    LogNormal { mu: f64, sigma: f64 },
    Empirical { file: String },
}

/// Inter-arrival process. Both kinds have mean gap `1/rate`; the Gamma
/// kind additionally exposes the coefficient of variation of the gaps,
/// with `cv = 1` coinciding with Poisson.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalProcess {
    Poisson { rate: f64 },
    Gamma { rate: f64, cv: f64 },
}

impl ArrivalProcess {
    pub fn rate(&self) -> f64 {
        match *self {
            ArrivalProcess::Poisson { rate } => rate,
            ArrivalProcess::Gamma { rate, .. } => rate,
        }
    }

    pub fn with_rate(&self, rate: f64) -> Self {
        match *self {
            ArrivalProcess::Poisson { .. } => ArrivalProcess::Poisson { rate },
            ArrivalProcess::Gamma { cv, .. } => ArrivalProcess::Gamma { rate, cv },
        }
    }
}

/// A batch of requests sorted by arrival time with unique ids.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Workload {
    pub requests: Vec<RequestSpec>,
}

impl Workload {
    pub fn new(mut requests: Vec<RequestSpec>) -> Result<Self, WorkloadError> {
        if requests.is_empty() {
            return Err(WorkloadError::Empty);
        }
        requests.sort_by(|a, b| {
            a.arrival_time
                .partial_cmp(&b.arrival_time)
                .expect("arrival times are finite")
                .then(a.id.cmp(&b.id))
        });
        let mut seen = std::collections::BTreeSet::new();
        for r in &requests {
            if !seen.insert(r.id) {
                return Err(WorkloadError::DuplicateId(r.id));
            }
            if r.arrival_time < 0.0 || !r.arrival_time.is_finite() {
                return Err(WorkloadError::NegativeArrival {
                    id: r.id,
                    arrival: r.arrival_time,
                });
            }
        }
        Ok(Workload { requests })
    }

    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }
}

/// One parsed trace row. `arrival_time` may be absent, in which case
/// arrivals must be synthesized before the trace can become a workload.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub id: RequestId,
    pub arrival_time: Option<f64>,
    pub prompt_len: u64,
    pub output_len: u64,
}

/// Parse a trace CSV with header `id,arrival_time,prompt_len,output_len`.
pub fn load_trace(path: &Path) -> Result<Vec<TraceRow>, WorkloadError> {
    let display = path.display().to_string();
    let parse_err = |line: u64, message: String| WorkloadError::Parse {
        path: display.clone(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| WorkloadError::Io {
            path: display.clone(),
            source: std::io::Error::other(e.to_string()),
        })?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, csv::Position::line);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, csv::Position::line);
        if record.len() != 4 {
            return Err(parse_err(line, format!("expected 4 fields, got {}", record.len())));
        }
        let id: RequestId = record[0]
            .parse()
            .map_err(|e| parse_err(line, format!("bad id: {e}")))?;
        let arrival_time = if record[1].is_empty() {
            None
        } else {
            let t: f64 = record[1]
                .parse()
                .map_err(|e| parse_err(line, format!("bad arrival_time: {e}")))?;
            Some(t)
        };
        let prompt_len: i64 = record[2]
            .parse()
            .map_err(|e| parse_err(line, format!("bad prompt_len: {e}")))?;
        let output_len: i64 = record[3]
            .parse()
            .map_err(|e| parse_err(line, format!("bad output_len: {e}")))?;
        if prompt_len < 1 {
            return Err(WorkloadError::NonPositiveLength {
                path: display.clone(),
                line,
                field: "prompt_len",
                value: prompt_len,
            });
        }
        if output_len < 1 {
            return Err(WorkloadError::NonPositiveLength {
                path: display.clone(),
                line,
                field: "output_len",
                value: output_len,
            });
        }
        rows.push(TraceRow {
            id,
            arrival_time,
            prompt_len: prompt_len as u64,
            output_len: output_len as u64,
        });
    }
    Ok(rows)
}

/// Build a workload from rows whose arrival times are all present.
pub fn workload_from_rows(rows: &[TraceRow]) -> Result<Workload, WorkloadError> {
    let specs = rows
        .iter()
        .map(|r| {
            let arrival_time = r.arrival_time.ok_or(WorkloadError::MissingArrival(r.id))?;
            Ok(RequestSpec {
                id: r.id,
                arrival_time,
                prompt_len: r.prompt_len,
                output_len: r.output_len,
            })
        })
        .collect::<Result<Vec<_>, WorkloadError>>()?;
    Workload::new(specs)
}

/// Build a workload from rows, overriding every arrival with the given
/// synthesized timestamps (row order).
pub fn workload_with_arrivals(
    rows: &[TraceRow],
    arrivals: &[f64],
) -> Result<Workload, WorkloadError> {
    if rows.len() != arrivals.len() {
        return Err(WorkloadError::ArrivalCountMismatch {
            got: arrivals.len(),
            want: rows.len(),
        });
    }
    let specs = rows
        .iter()
        .zip(arrivals)
        .map(|(r, &arrival_time)| RequestSpec {
            id: r.id,
            arrival_time,
            prompt_len: r.prompt_len,
            output_len: r.output_len,
        })
        .collect();
    Workload::new(specs)
}

/// Draw `n` strictly increasing arrival timestamps starting from the first
/// sampled gap. Deterministic for a fixed seed.
pub fn synthesize_arrivals(
    n: usize,
    process: &ArrivalProcess,
    seed: u64,
) -> Result<Vec<f64>, WorkloadError> {
    if process.rate() <= 0.0 {
        return Err(WorkloadError::InvalidDistribution(
            "arrival rate must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let mut clock = 0.0f64;
    let push_gap = |clock: &mut f64, out: &mut Vec<f64>, gap: f64| {
        let mut t = *clock + gap;
        // Float rounding can collapse a tiny gap; nudge to keep strict order.
        if let Some(&prev) = out.last() {
            if t <= prev {
                t = prev.next_up();
            }
        }
        out.push(t);
        *clock = t;
    };
    match *process {
        ArrivalProcess::Poisson { rate } => {
            let exp = Exp::new(rate)
                .map_err(|e| WorkloadError::InvalidDistribution(e.to_string()))?;
            for _ in 0..n {
                push_gap(&mut clock, &mut out, exp.sample(&mut rng));
            }
        }
        ArrivalProcess::Gamma { rate, cv } => {
            if cv <= 0.0 {
                return Err(WorkloadError::InvalidDistribution(
                    "gamma cv must be positive".into(),
                ));
            }
            // Unique gamma family with mean 1/rate and the requested CV.
            let shape = 1.0 / (cv * cv);
            let scale = cv * cv / rate;
            let gamma = Gamma::new(shape, scale)
                .map_err(|e| WorkloadError::InvalidDistribution(e.to_string()))?;
            for _ in 0..n {
                push_gap(&mut clock, &mut out, gamma.sample(&mut rng));
            }
        }
    }
    Ok(out)
}

/// Sample `n` (prompt_len, output_len) pairs, each clamped to
/// `[1, context_limit]`. Deterministic for a fixed seed.
pub fn sample_lengths(
    n: usize,
    input_dist: &LengthDistribution,
    output_dist: &LengthDistribution,
    context_limit: u64,
    seed: u64,
) -> Result<Vec<(u64, u64)>, WorkloadError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = ResolvedDist::resolve(input_dist)?;
    let output = ResolvedDist::resolve(output_dist)?;
    Ok((0..n)
        .map(|_| {
            let p = input.sample(&mut rng, context_limit);
            let o = output.sample(&mut rng, context_limit);
            (p, o)
        })
        .collect())
}

enum ResolvedDist {
    Fixed(u64),
    Uniform { lo: u64, hi: u64 },
    LogNormal(LogNormal<f64>),
    Empirical(Vec<u64>),
}

impl ResolvedDist {
    fn resolve(dist: &LengthDistribution) -> Result<Self, WorkloadError> {
        match dist {
            LengthDistribution::Fixed(n) => Ok(ResolvedDist::Fixed(*n)),
            LengthDistribution::Uniform { lo, hi } => {
                if lo > hi {
                    return Err(WorkloadError::InvalidDistribution(format!(
                        "uniform lo {lo} > hi {hi}"
                    )));
                }
                Ok(ResolvedDist::Uniform { lo: *lo, hi: *hi })
            }
            LengthDistribution::LogNormal { mu, sigma } => {
                let d = LogNormal::new(*mu, *sigma)
                    .map_err(|e| WorkloadError::InvalidDistribution(e.to_string()))?;
                Ok(ResolvedDist::LogNormal(d))
            }
            LengthDistribution::Empirical { file } => {
                let text = fs::read_to_string(file).map_err(|source| WorkloadError::Io {
                    path: file.clone(),
                    source,
                })?;
                let mut values = Vec::new();
                for (idx, raw) in text.lines().enumerate() {
                    let line = idx as u64 + 1;
                    let trimmed = raw.trim();
                    if trimmed.is_empty() {
                        continue;
                    }
                    let v: u64 = trimmed.parse().map_err(|e| WorkloadError::Parse {
                        path: file.clone(),
                        line,
                        message: format!("bad length: {e}"),
                    })?;
                    values.push(v);
                }
                if values.is_empty() {
                    return Err(WorkloadError::InvalidDistribution(format!(
                        "empirical file {file} holds no lengths"
                    )));
                }
                Ok(ResolvedDist::Empirical(values))
            }
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng, context_limit: u64) -> u64 {
        let raw = match self {
            ResolvedDist::Fixed(n) => *n,
            ResolvedDist::Uniform { lo, hi } => rng.random_range(*lo..=*hi),
            ResolvedDist::LogNormal(d) => {
                let x: f64 = d.sample(rng);
                x.round().clamp(0.0, u64::MAX as f64) as u64
            }
            ResolvedDist::Empirical(values) => values[rng.random_range(0..values.len())],
        };
        raw.clamp(1, context_limit)
    }
}

/// Mix two seeds into one; used to derive independent per-point streams.
pub fn mix_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Synthetic workload description, usable on its own or as the `workload`
/// section of a simulation config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadSpec {
    pub n_requests: usize,
    pub input_dist: LengthDistribution,
    pub output_dist: LengthDistribution,
    pub arrival: ArrivalProcess,
    /// Base seed of the length stream, mixed with the per-run seed.
    pub length_seed: u64,
    /// Keep the sampled request set identical across the rate/burstiness
    /// points of a sweep (only arrivals are redrawn per point).
    pub fixed_request_set: bool,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            n_requests: 200,
            input_dist: LengthDistribution::LogNormal { mu: 5.1, sigma: 1.0 },
            output_dist: LengthDistribution::LogNormal { mu: 4.8, sigma: 0.8 },
            arrival: ArrivalProcess::Poisson { rate: 2.0 },
            length_seed: 7,
            fixed_request_set: true,
        }
    }
}

impl WorkloadSpec {
    /// Generate a workload instance. `length_salt` selects the request set,
    /// `arrival_seed` the arrival draw, and `rate` optionally overrides the
    /// configured arrival rate. Prompt/output pairs are additionally capped
    /// so prompt + output never exceeds the context window.
    pub fn generate(
        &self,
        length_salt: u64,
        arrival_seed: u64,
        rate: Option<f64>,
        context_limit: u64,
    ) -> Result<Workload, WorkloadError> {
        if self.n_requests == 0 {
            return Err(WorkloadError::Empty);
        }
        let lengths = sample_lengths(
            self.n_requests,
            &self.input_dist,
            &self.output_dist,
            context_limit,
            mix_seed(self.length_seed, length_salt),
        )?;
        let process = match rate {
            Some(r) => self.arrival.with_rate(r),
            None => self.arrival,
        };
        let arrivals = synthesize_arrivals(self.n_requests, &process, arrival_seed)?;
        let specs = lengths
            .iter()
            .zip(&arrivals)
            .enumerate()
            .map(|(i, (&(p, o), &arrival_time))| {
                let prompt_len = p.min(context_limit.saturating_sub(1)).max(1);
                let output_len = o.min(context_limit - prompt_len).max(1);
                RequestSpec {
                    id: i as RequestId,
                    arrival_time,
                    prompt_len,
                    output_len,
                }
            })
            .collect();
        Workload::new(specs)
    }
}
