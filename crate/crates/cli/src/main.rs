//! falsim: a deterministic simulator for federated adversarial training.
//!
//! Subcommands: `run` (train one configuration across seeds), `sweep`
//! (vary one knob and emit a trend table), `stability` (replace-one
//! sensitivity of the trained model), `check-width` (shallow-net
//! smoothness constants and the width condition). Exit codes: 0 success,
//! 2 configuration/validation error, 3 runtime failure.

mod config;
mod runner;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use falsim_core::metrics::StabilityConfig;

use config::{invalid, CliError, CliResult, ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(
    name = "falsim",
    version,
    about = "Deterministic simulator for federated adversarial training"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one configuration across its seeds and write results
    Run(CommonArgs),
    /// Run the configuration once per value of a swept knob and emit a trend
    Sweep(SweepArgs),
    /// Estimate replace-one stability of the trained model
    Stability(StabilityArgs),
    /// Evaluate the shallow-net width condition for the configured horizon
    CheckWidth(CommonArgs),
}

/// Flags shared by every subcommand: the config file plus overrides.
#[derive(Args)]
struct CommonArgs {
    /// JSON configuration file; omitted means all defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Attack radius override
    #[arg(long)]
    rho: Option<f64>,
    /// Label-skew percentage override
    #[arg(long)]
    skew: Option<f64>,
    /// Client count override
    #[arg(long)]
    clients: Option<usize>,
    /// Communication rounds override
    #[arg(long)]
    rounds: Option<usize>,
    /// Server algorithm override: vfal or sfal
    #[arg(long)]
    algo: Option<String>,
    /// Local trainer override: ssa, rsa, or opsa
    #[arg(long)]
    smoothing: Option<String>,
    /// Perturbation draws per rsa step
    #[arg(long)]
    q: Option<usize>,
    /// rsa perturbation radius
    #[arg(long)]
    gamma: Option<f64>,
    /// Aggregation rule override: uniform, alpha_slack, tv_weighted, tv_inverse
    #[arg(long)]
    aggregator: Option<String>,
    /// Comma-separated seed list, e.g. 1,2,3
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Output directory override
    #[arg(long)]
    out: Option<PathBuf>,
    /// Validate and echo the effective configuration without running
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Swept knob and values, e.g. rho=0,0.25,0.5 (axes: rho, a, m, q, rounds)
    #[arg(long)]
    vary: String,
}

#[derive(Args)]
struct StabilityArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Which client's shard receives the replacement
    #[arg(long, default_value_t = 0)]
    client: usize,
    /// How many sample positions to probe
    #[arg(long, default_value_t = 3)]
    indices: usize,
    /// Fresh replacement draws per position
    #[arg(long, default_value_t = 3)]
    resamples: usize,
    /// Self-test mode: replace each probed sample with itself; the estimate
    /// must come out exactly zero
    #[arg(long)]
    null_replacement: bool,
}

impl CommonArgs {
    fn overrides(&self) -> CliResult<Overrides> {
        Ok(Overrides {
            rho: self.rho,
            skew: self.skew,
            clients: self.clients,
            rounds: self.rounds,
            algo: self.algo.as_deref().map(config::parse_algo).transpose()?,
            smoothing: self
                .smoothing
                .as_deref()
                .map(config::parse_method)
                .transpose()?,
            q: self.q,
            gamma: self.gamma,
            aggregator: self
                .aggregator
                .as_deref()
                .map(config::parse_rule)
                .transpose()?,
            seeds: self.seeds.clone(),
            out: self.out.clone(),
        })
    }

    fn load(&self) -> CliResult<ExperimentConfig> {
        ExperimentConfig::load(self.config.as_deref(), &self.overrides()?)
    }
}

fn configure_threads() -> CliResult<()> {
    match std::env::var("FALSIM_THREADS") {
        Err(_) => Ok(()),
        Ok(raw) => {
            let n: usize = raw
                .trim()
                .parse()
                .ok()
                .filter(|&n| n >= 1)
                .ok_or_else(|| {
                    invalid(format!(
                        "FALSIM_THREADS must be a positive integer, got {raw:?}"
                    ))
                })?;
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| invalid(format!("cannot size the thread pool: {e}")))
        }
    }
}

fn cmd_run(args: &CommonArgs) -> CliResult<()> {
    let cfg = args.load()?;
    cfg.validate_for_training()?;
    if args.dry_run {
        print!("{}", cfg.echo());
        return Ok(());
    }
    let dir = cfg.out.clone();
    let summary = runner::run_experiment(&cfg, &dir)?;
    println!("run: wrote {}", dir.display());
    for w in &summary.warnings {
        println!("warning: {w}");
    }
    match (&summary.run_gap, summary.rounds.last()) {
        (Some(gap), Some(last)) => {
            println!(
                "final round {}: train robust loss {:.6}, test robust loss {:.6}",
                last.round, last.train_robust_loss.mean, last.test_robust_loss.mean
            );
            println!(
                "loss gap over the last {} evaluated round(s): {:.6} (std {:.6})",
                gap.window_rounds, gap.loss_gap.mean, gap.loss_gap.std
            );
            if let Some(acc) = &gap.acc_gap {
                println!(
                    "accuracy gap over the same window: {:.6} (std {:.6})",
                    acc.mean, acc.std
                );
            }
        }
        _ => println!("no evaluated rounds (training.rounds = 0?)"),
    }
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> CliResult<()> {
    let cfg = args.common.load()?;
    cfg.validate_for_training()?;
    let (key, values) = runner::parse_vary(&args.vary)?;
    if args.common.dry_run {
        print!("{}", cfg.echo());
        return Ok(());
    }
    let dir = cfg.out.clone();
    let trend = runner::sweep(&cfg, key, &values, &dir)?;
    println!("sweep: wrote {}", dir.join("trend.csv").display());
    print!("{trend}");
    Ok(())
}

fn cmd_stability(args: &StabilityArgs) -> CliResult<()> {
    let cfg = args.common.load()?;
    cfg.validate_for_training()?;
    if args.common.dry_run {
        print!("{}", cfg.echo());
        return Ok(());
    }
    let stability = StabilityConfig {
        client: args.client,
        indices: args.indices,
        resamples: args.resamples,
        seeds: cfg.seeds.clone(),
        null_replacement: args.null_replacement,
    };
    let dir = cfg.out.clone();
    let estimate = runner::run_stability(&cfg, &stability, &dir)?;
    println!("stability: wrote {}", dir.join("stability.json").display());
    println!(
        "epsilon_hat = {} (client {}, {} position(s), {} resample(s), T = {}, {} seed(s))",
        estimate.epsilon_hat,
        estimate.client,
        estimate.per_index.len(),
        estimate.resamples,
        estimate.t_rounds,
        estimate.seeds.len()
    );
    Ok(())
}

fn cmd_check_width(args: &CommonArgs) -> CliResult<()> {
    let cfg = args.load()?;
    if args.dry_run {
        print!("{}", cfg.echo());
        return Ok(());
    }
    let report = runner::check_width(&cfg)?;
    let mut text = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    text.push('\n');
    print!("{text}");
    Ok(())
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.cmd {
        Cmd::Run(args) => cmd_run(args),
        Cmd::Sweep(args) => cmd_sweep(args),
        Cmd::Stability(args) => cmd_stability(args),
        Cmd::CheckWidth(args) => cmd_check_width(args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    if let Err(e) = configure_threads() {
        eprintln!("error: {}", e.message());
        return ExitCode::from(e.exit_code());
    }
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
