//! Command-line harness for the serving simulator.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use servesim_core::config::{CacheMode, SchedulerPolicy, SimConfig};
use servesim_core::cost::calibrate_rho;
use servesim_core::engine::run;
use servesim_core::metrics::compute_metrics;
use servesim_core::report;
use servesim_core::sweep::{run_compare, run_sweep};
use servesim_core::workload::{
    load_trace, synthesize_arrivals, workload_from_rows, workload_with_arrivals, Workload,
};

#[derive(Parser)]
#[command(
    name = "servesim",
    about = "Discrete-event simulator for hybrid-cache LLM serving schedulers",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one trace and write metrics, iteration log, and summary.
    Run {
        /// Simulation config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Trace CSV: id,arrival_time,prompt_len,output_len.
        #[arg(long)]
        trace: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep the configured synthetic workload across request rates.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Request rates, strictly increasing (e.g. 1.0,2.0,4.0).
        #[arg(long, value_delimiter = ',', required = true)]
        rates: Vec<f64>,
        /// Seeds, one workload instance each.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// Attainment thresholds (%) for effective throughput.
        #[arg(long, value_delimiter = ',', default_value = "90")]
        threshold: Vec<f64>,
        /// Output directory; omit to print the sweep JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the hidden-cache cost coefficient from measured samples.
    Calibrate {
        /// Samples CSV: m,extra_seconds.
        #[arg(long)]
        samples: PathBuf,
    },
    /// Run a scheduling-policy / cache-mode ablation grid.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Policies to test (adaptive, fcfs, random).
        #[arg(long, value_delimiter = ',', default_value = "adaptive,fcfs,random")]
        policies: Vec<String>,
        /// Cache modes to test (hybrid, kv).
        #[arg(long, value_delimiter = ',', default_value = "hybrid,kv")]
        cache: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// Output directory; omit to print the grid JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run { config, trace, out } => cmd_run(&config, &trace, &out),
        Command::Sweep { config, rates, seeds, threshold, out } => {
            cmd_sweep(&config, &rates, &seeds, &threshold, out.as_deref())
        }
        Command::Calibrate { samples } => cmd_calibrate(&samples),
        Command::Compare { config, policies, cache, seeds, out } => {
            cmd_compare(&config, &policies, &cache, &seeds, out.as_deref())
        }
    }
}

/// Build the workload from a trace, synthesizing arrivals from the config's
/// workload section when the trace carries none.
fn workload_from_trace(path: &Path, config: &SimConfig) -> Result<Workload> {
    let rows = load_trace(path)?;
    if rows.is_empty() {
        bail!("trace {} holds no requests; refusing to run", path.display());
    }
    let workload = if rows.iter().all(|r| r.arrival_time.is_some()) {
        workload_from_rows(&rows)?
    } else {
        let spec = config.workload.as_ref().with_context(|| {
            format!(
                "trace {} has rows without arrival_time and the config has no workload section \
                 to synthesize arrivals from",
                path.display()
            )
        })?;
        let arrivals = synthesize_arrivals(rows.len(), &spec.arrival, config.rng_seed)?;
        workload_with_arrivals(&rows, &arrivals)?
    };
    Ok(workload)
}

fn cmd_run(config_path: &Path, trace: &Path, out: &Path) -> Result<()> {
    let config = SimConfig::from_file(config_path)?;
    let workload = workload_from_trace(trace, &config)?;
    let result = run(&workload, &config)?;
    let metrics = compute_metrics(&result, &config.slo_spec()?)?;

    fs::create_dir_all(out)
        .with_context(|| format!("creating output directory {}", out.display()))?;
    write_file(&out.join("metrics.csv"), &report::metrics_csv(&metrics))?;
    write_file(&out.join("iterations.jsonl"), &report::iteration_log_jsonl(&result))?;
    let summary = report::summary_json(&result, &metrics);
    write_file(&out.join("summary.json"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn cmd_sweep(
    config_path: &Path,
    rates: &[f64],
    seeds: &[u64],
    thresholds: &[f64],
    out: Option<&Path>,
) -> Result<()> {
    let config = SimConfig::from_file(config_path)?;
    let sweep = run_sweep(&config, rates, seeds, thresholds)?;
    let json = report::sweep_json(&sweep);
    if let Some(dir) = out {
        fs::create_dir_all(dir)
            .with_context(|| format!("creating output directory {}", dir.display()))?;
        write_file(&dir.join("sweep.json"), &json)?;
        for c in &sweep.cdfs {
            write_file(&dir.join(format!("ttft_cdf_rate_{}.csv", c.rate)), &report::cdf_csv(&c.ttft))?;
            write_file(
                &dir.join(format!("tbt_cdf_rate_{}.csv", c.rate)),
                &report::cdf_csv(&c.p99_tbt),
            )?;
        }
        for p in &sweep.points {
            println!(
                "rate {:>6}: attainment {:6.2}% (ttft {:6.2}%, tbt {:6.2}%)",
                p.rate, p.attainment, p.ttft_attainment, p.tbt_attainment
            );
        }
        for t in &sweep.effective_throughput {
            println!("effective throughput @ {}%: {} req/s", t.threshold, t.rate);
        }
    } else {
        print!("{json}");
    }
    Ok(())
}

fn cmd_calibrate(samples_path: &Path) -> Result<()> {
    let text = fs::read_to_string(samples_path)
        .with_context(|| format!("reading {}", samples_path.display()))?;
    let mut samples = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (idx == 0 && line.starts_with("m,")) {
            continue;
        }
        let (m, t) = line
            .split_once(',')
            .with_context(|| format!("line {}: expected m,extra_seconds", idx + 1))?;
        samples.push((
            m.trim().parse::<u64>().with_context(|| format!("line {}: bad m", idx + 1))?,
            t.trim().parse::<f64>().with_context(|| format!("line {}: bad seconds", idx + 1))?,
        ));
    }
    let rho = calibrate_rho(&samples)?;
    println!("{rho}");
    Ok(())
}

fn parse_policies(names: &[String]) -> Result<Vec<SchedulerPolicy>> {
    names
        .iter()
        .map(|n| match n.as_str() {
            "adaptive" => Ok(SchedulerPolicy::Adaptive),
            "fcfs" => Ok(SchedulerPolicy::Fcfs),
            "random" => Ok(SchedulerPolicy::Random),
            other => bail!("unknown policy {other:?} (expected adaptive, fcfs, or random)"),
        })
        .collect()
}

fn parse_cache_modes(names: &[String]) -> Result<Vec<CacheMode>> {
    names
        .iter()
        .map(|n| match n.as_str() {
            "hybrid" => Ok(CacheMode::Hybrid),
            "kv" | "kv_only" => Ok(CacheMode::KvOnly),
            other => bail!("unknown cache mode {other:?} (expected hybrid or kv)"),
        })
        .collect()
}

fn cmd_compare(
    config_path: &Path,
    policies: &[String],
    cache: &[String],
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<()> {
    let config = SimConfig::from_file(config_path)?;
    let grid = run_compare(&config, &parse_policies(policies)?, &parse_cache_modes(cache)?, seeds)?;
    for row in &grid.rows {
        println!(
            "{:<10} {:<8} attainment {:6.2}% (ttft {:6.2}%, tbt {:6.2}%)",
            format!("{:?}", row.policy).to_lowercase(),
            format!("{:?}", row.cache_mode).to_lowercase(),
            row.attainment,
            row.ttft_attainment,
            row.tbt_attainment
        );
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)
            .with_context(|| format!("creating output directory {}", dir.display()))?;
        write_file(&dir.join("compare.json"), &report::compare_json(&grid))?;
    }
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}
