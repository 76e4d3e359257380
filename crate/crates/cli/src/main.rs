//! `agentcache` command-line entry point.
//!
//! Exit codes: 0 on success, 1 for configuration errors, 2 for runtime
//! failures (including failed cells and report drift).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use agentcache::harness::report::summary_drift;
use agentcache::harness::{
    run_experiment, CellSummary, ExperimentConfig, Overrides, ReportSummary, RunReport,
};
use agentcache::kv::EvictionPolicy;
use agentcache::logits_cache::ReplayPolicy;
use agentcache::protocol::SessionConfig;
use agentcache::{server, Error};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "agentcache",
    version,
    about = "Agent-aware KV and logits cache simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run an experiment grid and write its report directory.
    Run(RunArgs),
    /// Serve the NDJSON protocol over stdio or TCP.
    Serve(ServeArgs),
    /// Recompute a report's summary from its CSV rows and check it.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PolicyArg {
    None,
    Step,
    Hotspot,
}

impl From<PolicyArg> for ReplayPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::None => ReplayPolicy::None,
            PolicyArg::Step => ReplayPolicy::StepWise,
            PolicyArg::Hotspot => ReplayPolicy::Hotspot,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EvictionArg {
    Lru,
    Agent,
}

impl From<EvictionArg> for EvictionPolicy {
    fn from(e: EvictionArg) -> Self {
        match e {
            EvictionArg::Lru => EvictionPolicy::Lru,
            EvictionArg::Agent => EvictionPolicy::AgentAware,
        }
    }
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Report directory; defaults to the config's `output`, then `out/<name>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace the seed grid with one seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace the replay-policy grid with one policy.
    #[arg(long, value_enum)]
    policy: Option<PolicyArg>,
    /// Replace the eviction grid with one policy.
    #[arg(long, value_enum)]
    eviction: Option<EvictionArg>,
    /// Worker threads; 0 uses every core, 1 runs sequentially.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("transport").required(true).args(["listen", "stdio"])))]
struct ServeArgs {
    /// TCP address to listen on, for example 127.0.0.1:7070.
    #[arg(long)]
    listen: Option<String>,
    /// Serve a single session on stdin/stdout.
    #[arg(long)]
    stdio: bool,
    /// Session config (JSON with `model`, `kv`, `logits_cache_bytes`).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Report directory written by `run`.
    #[arg(long = "in")]
    input: PathBuf,
    /// Largest tolerated difference between stored and recomputed statistics.
    #[arg(long, default_value_t = 1e-9)]
    tolerance: f64,
}

/// Marks an error as a configuration problem (exit code 1).
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("reading {}: {e}", path.display())).into())
}

fn config_err(e: Error) -> anyhow::Error {
    match e {
        Error::Config(_) | Error::InvalidInput(_) | Error::Compile { .. } => {
            ConfigError(e.to_string()).into()
        }
        other => other.into(),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

fn print_summary(summary: &ReportSummary) {
    println!(
        "{:>4} {:<13} {:<9} {:<11} {:>5} {:>5} {:>8} {:>9} {:>9} {:>8} {:>8} {:>8}",
        "cell",
        "workload",
        "policy",
        "eviction",
        "temp",
        "seed",
        "measured",
        "hit",
        "replayed",
        "speedup",
        "hot",
        "non_hot"
    );
    for c in &summary.cells {
        print_cell(c);
    }
}

fn print_cell(c: &CellSummary) {
    let m = &c.meta;
    println!(
        "{:>4} {:<13} {:<9} {:<11} {:>5.2} {:>5} {:>8} {:>9} {:>9} {:>8} {:>8} {:>8}{}",
        m.cell,
        m.workload,
        m.policy,
        m.eviction,
        m.temperature,
        m.seed,
        c.measured,
        fmt_opt(c.mean_hit_ratio),
        fmt_opt(c.mean_replayed_len),
        fmt_opt(c.mean_speedup),
        fmt_opt(c.hotspot_hit_rate),
        fmt_opt(c.non_hotspot_hit_rate),
        c.error
            .as_ref()
            .map(|e| format!("  error: {e}"))
            .unwrap_or_default(),
    );
}

fn run(args: RunArgs) -> Result<()> {
    let text = read_text(&args.config)?;
    let mut cfg = ExperimentConfig::from_json(&text).map_err(config_err)?;
    cfg.apply(&Overrides {
        seed: args.seed,
        policy: args.policy.map(Into::into),
        eviction: args.eviction.map(Into::into),
        workers: args.workers,
        output: args.out.clone(),
    });
    cfg.validate().map_err(config_err)?;
    let out = cfg
        .output
        .clone()
        .unwrap_or_else(|| PathBuf::from("out").join(&cfg.name));
    let report = run_experiment(&cfg)?;
    let summary = report
        .write_dir(&out)
        .with_context(|| format!("writing report to {}", out.display()))?;
    print_summary(&summary);
    println!("report written to {}", out.display());
    if !report.errors.is_empty() {
        bail!(
            "{} of {} cells failed",
            report.errors.len(),
            report.cells.len()
        );
    }
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let cfg = match &args.config {
        Some(p) => serde_json::from_str::<SessionConfig>(&read_text(p)?)
            .map_err(|e| ConfigError(format!("session config: {e}")))?,
        None => SessionConfig::default(),
    };
    if args.stdio {
        server::serve_stdio(&cfg)?;
        return Ok(());
    }
    let addr = args.listen.expect("clap enforces a transport");
    let listener =
        server::bind(addr.as_str()).map_err(|e| ConfigError(format!("binding {addr}: {e}")))?;
    eprintln!("listening on {}", listener.local_addr()?);
    server::serve_tcp(&cfg, listener)?;
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let (report, stored) = RunReport::read_dir(&args.input).map_err(|e| match e {
        Error::Io(m) => ConfigError(format!("reading {}: {m}", args.input.display())).into(),
        other => config_err(other),
    })?;
    let recomputed = report.summary();
    print_summary(&recomputed);
    let drift = summary_drift(&stored, &recomputed)?;
    println!("max drift between stored and recomputed summary: {drift:.3e}");
    if drift > args.tolerance {
        bail!(
            "summary drift {drift:.3e} exceeds tolerance {:.3e}",
            args.tolerance
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Serve(a) => serve(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
