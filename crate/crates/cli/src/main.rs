//! Command-line front end for the manychains engine: single runs,
//! seed-replication studies, chain-count sweeps, oracle studies, and
//! re-summarization of stored draws.
//!
//! Exit codes: 0 success, 1 invalid arguments, 2 runtime failure,
//! 3 targets not met (adaptive mode exhausted its budget).

mod experiments;
mod formats;

use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use manychains::engine::RunConfig;
use manychains::oracle::OuProcessSpec;
use manychains::samplers::{AdaptationMode, SamplerKind};

use experiments::{CmdOutcome, ExperimentContext, OracleParams};
use formats::DrawFormat;

#[derive(Parser)]
#[command(
    name = "manychains",
    about = "Parallel MCMC runner with multi-chain convergence diagnostics",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON config file; CLI flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for all emitted files.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Root seed; every chain and replicate stream derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Draw-file format.
    #[arg(long, global = true, value_enum, default_value_t = DrawFormat::Csv)]
    format: DrawFormat,
}

#[derive(Args, Clone, Default)]
struct RunFlags {
    /// Target spec, e.g. gaussian:d=10, illcond:d=51,kappa=1000, banana:curv=1,scale=2
    #[arg(long)]
    target: Option<String>,

    /// Sampler kernel: rwm, mala, or hmc.
    #[arg(long)]
    sampler: Option<String>,

    #[arg(long)]
    chains: Option<usize>,

    #[arg(long)]
    warmup: Option<usize>,

    /// Sampling iterations per chain.
    #[arg(long)]
    samples: Option<usize>,

    /// Initialization-group count K (must divide the chain count).
    #[arg(long)]
    groups: Option<usize>,

    /// Adaptation mode: per-chain or cross-chain.
    #[arg(long)]
    adapt: Option<String>,

    /// Switch to adaptive stopping at this measured ESS.
    #[arg(long)]
    target_ess: Option<f64>,

    /// Convergence tolerance epsilon in R-hat <= 1 + epsilon.
    #[arg(long)]
    rhat_threshold: Option<f64>,

    /// Per-chain iteration budget for adaptive stopping.
    #[arg(long)]
    max_total_iterations: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one run and write draws, summary, and metadata.
    Run(RunArgs),
    /// Repeat a run under many seeds; tabulate diagnostic noise.
    Replicate(ReplicateArgs),
    /// Sweep the chain count under cross-chain adaptation (warmup cost study).
    SweepChains(SweepArgs),
    /// Emit analytic oracle studies (OU decay curve, two-state kernel).
    Oracle(OracleArgs),
    /// Recompute the diagnostics report from a stored draws file.
    Summarize(SummarizeArgs),
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    flags: RunFlags,
}

#[derive(Args)]
struct ReplicateArgs {
    #[command(flatten)]
    flags: RunFlags,

    /// Number of replicate runs.
    #[arg(long, default_value_t = 20)]
    replicates: usize,

    /// Explicit comma-separated seed list (overrides --replicates).
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    flags: RunFlags,

    /// Comma-separated, strictly increasing chain counts.
    #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
    sweep: Vec<usize>,

    /// Standardized-bias threshold the warmup must reach.
    #[arg(long, default_value_t = 0.1)]
    bias_threshold: f64,

    /// Replicate seeds per sweep cell.
    #[arg(long, default_value_t = 20)]
    replicates: usize,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 2.0)]
    mu0: f64,

    #[arg(long, default_value_t = 1.0)]
    sigma0: f64,

    #[arg(long, default_value_t = 0.0)]
    mu: f64,

    #[arg(long, default_value_t = 1.0)]
    sigma: f64,

    /// Decay curve covers t = 0, t_step, ..., t_max.
    #[arg(long, default_value_t = 3.0)]
    t_max: f64,

    #[arg(long, default_value_t = 0.5)]
    t_step: f64,

    /// Simulated chain length behind the measured two-state ESS.
    #[arg(long, default_value_t = 1_000_000)]
    two_state_steps: usize,
}

#[derive(Args)]
struct SummarizeArgs {
    /// Path to draws.csv or draws.bin (binary needs its .meta.json sidecar).
    #[arg(long)]
    draws: PathBuf,

    #[arg(long)]
    rhat_threshold: Option<f64>,
}

/// JSON config file schema: the engine run config plus experiment extras.
#[derive(Deserialize, Default)]
struct FileConfig {
    #[serde(flatten)]
    run: RunConfig,
    target: Option<String>,
    ou: Option<OuProcessSpec>,
}

const DEFAULT_TARGET: &str = "gaussian:d=1";

fn load_file_config(path: Option<&PathBuf>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text =
                fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text)
                .map_err(|e| manychains::Error::invalid(format!("config {}: {e}", p.display())))
                .map_err(Into::into)
        }
    }
}

fn resolve_config(
    file: &FileConfig,
    flags: &RunFlags,
    seed: Option<u64>,
) -> Result<(RunConfig, String)> {
    let mut config = file.run.clone();
    if let Some(c) = flags.chains {
        config.chains = c;
    }
    if let Some(w) = flags.warmup {
        config.warmup = w;
    }
    if let Some(s) = flags.samples {
        config.sampling = s;
    }
    if let Some(g) = flags.groups {
        config.groups = g;
    }
    if let Some(s) = &flags.sampler {
        config.sampler = SamplerKind::parse(s)?;
    }
    if let Some(a) = &flags.adapt {
        config.adaptation = AdaptationMode::parse(a)?;
    }
    if let Some(t) = flags.target_ess {
        config.target_ess = Some(t);
    }
    if let Some(r) = flags.rhat_threshold {
        config.rhat_threshold = r;
    }
    if let Some(m) = flags.max_total_iterations {
        config.max_total_iterations = Some(m);
    }
    if let Some(s) = seed {
        config.root_seed = s;
    }
    let target = flags
        .target
        .clone()
        .or_else(|| file.target.clone())
        .unwrap_or_else(|| DEFAULT_TARGET.to_string());
    Ok((config, target))
}

fn dispatch(cli: &Cli) -> Result<CmdOutcome> {
    let ctx = ExperimentContext {
        out_dir: cli.out.clone(),
        format: cli.format,
    };
    let file = load_file_config(cli.config.as_ref())?;

    match &cli.command {
        Command::Run(args) => {
            let (config, target) = resolve_config(&file, &args.flags, cli.seed)?;
            experiments::cmd_run(&ctx, &config, &target)
        }
        Command::Replicate(args) => {
            let (config, target) = resolve_config(&file, &args.flags, cli.seed)?;
            let replicates = args.seeds.as_ref().map_or(args.replicates, Vec::len);
            experiments::cmd_replicate(&ctx, &config, &target, replicates, args.seeds.clone())
        }
        Command::SweepChains(args) => {
            let (mut config, target) = resolve_config(&file, &args.flags, cli.seed)?;
            if args.flags.adapt.is_none() {
                config.adaptation = AdaptationMode::CrossChain;
            }
            experiments::cmd_sweep_chains(
                &ctx,
                &config,
                &target,
                &args.sweep,
                args.bias_threshold,
                args.replicates,
            )
        }
        Command::Oracle(args) => {
            let spec = file.ou.unwrap_or(OuProcessSpec {
                mu0: args.mu0,
                sigma0: args.sigma0,
                mu: args.mu,
                sigma: args.sigma,
            });
            let params = OracleParams {
                spec,
                t_max: args.t_max,
                t_step: args.t_step,
                two_state_steps: args.two_state_steps,
                seed: cli.seed.unwrap_or(file.run.root_seed),
            };
            experiments::cmd_oracle(&ctx, &params)
        }
        Command::Summarize(args) => {
            let threshold = args.rhat_threshold.unwrap_or(file.run.rhat_threshold);
            experiments::cmd_summarize(&ctx, &args.draws, threshold)
        }
    }
}

fn exit_code_for(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<manychains::Error>() {
            return match e {
                manychains::Error::InvalidArgument(_)
                | manychains::Error::Parse { .. }
                | manychains::Error::BadInitialPoint { .. } => 1,
                _ => 2,
            };
        }
    }
    2
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };

    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: could not configure {n} threads: {e}");
            std::process::exit(2);
        }
    }

    match dispatch(&cli) {
        Ok(CmdOutcome::Done) => {}
        Ok(CmdOutcome::TargetsNotMet) => {
            eprintln!("targets not met within the iteration budget");
            std::process::exit(3);
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(exit_code_for(&e));
        }
    }
}
