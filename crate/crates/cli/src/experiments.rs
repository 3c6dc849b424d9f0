//! The experiment drivers behind each CLI subcommand: single runs,
//! seed-replication studies, the cross-chain chain-count sweep, oracle
//! studies, and re-summarization of stored draws.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use manychains::diagnostics::{self, float17, ChainMeta, QuantityOfInterest};
use manychains::engine::{self, RunConfig, StoppingReason, WindowMeasurement};
use manychains::model::parse_target_spec;
use manychains::oracle::{
    ou_marginal, simulate_two_state, tv_normal, two_state_analytics, OuProcessSpec,
};
use manychains::rng::StreamRng;
use manychains::samplers::AdaptationMode;
use manychains::Error;

use crate::formats::{self, DrawFormat};

/// Output-directory and format context shared by all commands.
pub struct ExperimentContext {
    pub out_dir: PathBuf,
    pub format: DrawFormat,
}

impl ExperimentContext {
    fn ensure_out_dir(&self) -> Result<()> {
        fs::create_dir_all(&self.out_dir)
            .with_context(|| format!("creating output directory {}", self.out_dir.display()))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

/// Whether the command met its stated targets (exit code 3 otherwise).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CmdOutcome {
    Done,
    TargetsNotMet,
}

/// Deterministic per-replicate seed derivation.
pub fn replicate_seed(root_seed: u64, replicate: u64) -> u64 {
    StreamRng::from_key(&[root_seed, 0x5eed, replicate]).key()
}

#[derive(Serialize)]
struct RunMeta<'a> {
    target: &'a str,
    config: &'a RunConfig,
    stopping: StoppingReason,
    warmup_secs: f64,
    sampling_secs: f64,
    total_gradient_evals: u64,
    grad_evals_per_chain: &'a [u64],
    clamped_windows: u64,
    chain_meta: &'a [ChainMeta],
}

/// One engine run: draws, summary, and run metadata on disk.
pub fn cmd_run(ctx: &ExperimentContext, config: &RunConfig, target: &str) -> Result<CmdOutcome> {
    let model = parse_target_spec(target)?;
    ctx.ensure_out_dir()?;
    let result = engine::execute(config, &model, &[])?;

    let draws_path = ctx.path(formats::draws_file_name(ctx.format));
    formats::write_draws(&draws_path, &result.matrix, ctx.format)?;
    formats::write_summary(&ctx.out_dir, &result.report)?;

    let meta = RunMeta {
        target,
        config,
        stopping: result.stopping,
        warmup_secs: result.warmup_secs,
        sampling_secs: result.sampling_secs,
        total_gradient_evals: result.total_gradient_evals(),
        grad_evals_per_chain: &result.grad_evals_per_chain,
        clamped_windows: result.clamped_windows,
        chain_meta: result.matrix.meta(),
    };
    let meta_path = ctx.path("run_meta.json");
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)
        .with_context(|| format!("writing {}", meta_path.display()))?;

    Ok(if result.stopping == StoppingReason::BudgetExhausted {
        CmdOutcome::TargetsNotMet
    } else {
        CmdOutcome::Done
    })
}

/// Repeats the same run under R different seeds and tabulates the
/// seed-to-seed spread of the diagnostics for the first quantity.
pub fn cmd_replicate(
    ctx: &ExperimentContext,
    config: &RunConfig,
    target: &str,
    replicates: usize,
    seeds: Option<Vec<u64>>,
) -> Result<CmdOutcome> {
    if replicates == 0 {
        return Err(Error::invalid("need at least one replicate").into());
    }
    let model = parse_target_spec(target)?;
    ctx.ensure_out_dir()?;
    let seeds = match seeds {
        Some(list) => {
            if list.is_empty() {
                return Err(Error::invalid("seed list is empty").into());
            }
            list
        }
        None => (0..replicates as u64)
            .map(|r| replicate_seed(config.root_seed, r))
            .collect(),
    };

    let rows: Vec<String> = seeds
        .par_iter()
        .map(|&seed| -> Result<String> {
            let mut cfg = config.clone();
            cfg.root_seed = seed;
            let result = engine::run(&cfg, &model, &[])?;
            let q = &result.report.quantities[0];
            Ok(format!(
                "{seed},{},{},{},{},{},{},{}\n",
                float17(q.rhat),
                float17(q.split_rhat),
                float17(q.ess),
                float17(q.mean),
                float17(q.q05),
                float17(q.q50),
                float17(q.q95),
            ))
        })
        .collect::<Result<_>>()?;

    let mut out = String::from("seed,rhat,split_rhat,ess,mean,q05,q50,q95\n");
    for row in rows {
        out.push_str(&row);
    }
    let path = ctx.path("replicate.csv");
    fs::write(&path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(CmdOutcome::Done)
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Standardized bias at one window, averaging the pooled estimates over
/// replicate seeds first: b_i = |mean_r est_i - mu_i| / sd_i, maxed over i.
fn max_standardized_bias(
    traces: &[Vec<WindowMeasurement>],
    window: usize,
    true_mean: &[f64],
    true_sd: &[f64],
) -> f64 {
    let d = true_mean.len();
    let mut worst = 0.0f64;
    for i in 0..d {
        let avg: f64 =
            traces.iter().map(|t| t[window].pooled_mean[i]).sum::<f64>() / traces.len() as f64;
        worst = worst.max((avg - true_mean[i]).abs() / true_sd[i]);
    }
    worst
}

/// Chain-count sweep under cross-chain adaptation: for each M, how many
/// gradient evaluations per chain until the warmup bias falls below the
/// threshold. Initialization seeds are shared across M cells so the sweep
/// isolates the chain-count effect.
pub fn cmd_sweep_chains(
    ctx: &ExperimentContext,
    config: &RunConfig,
    target: &str,
    sweep: &[usize],
    bias_threshold: f64,
    replicates: usize,
) -> Result<CmdOutcome> {
    if config.adaptation != AdaptationMode::CrossChain {
        return Err(Error::invalid("sweep-chains is defined for cross-chain adaptation").into());
    }
    if sweep.is_empty() || sweep.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("sweep chain counts must be strictly increasing").into());
    }
    if !(bias_threshold > 0.0) {
        return Err(Error::invalid("bias threshold must be positive").into());
    }
    if replicates == 0 {
        return Err(Error::invalid("need at least one replicate").into());
    }
    let model = parse_target_spec(target)?;
    let true_mean = model
        .analytic_mean()
        .ok_or_else(|| Error::invalid("sweep target needs an analytic mean"))?
        .to_vec();
    let true_sd = model
        .analytic_marginal_sd()
        .ok_or_else(|| Error::invalid("sweep target needs analytic marginal sds"))?
        .to_vec();
    ctx.ensure_out_dir()?;

    let mut out = String::from("chains,grad_evals_per_chain,achieved_bias,achieved\n");
    for &m in sweep {
        let traces: Vec<Vec<WindowMeasurement>> = (0..replicates as u64)
            .into_par_iter()
            .map(|r| -> Result<Vec<WindowMeasurement>> {
                let mut cfg = config.clone();
                cfg.chains = m;
                cfg.groups = m;
                cfg.root_seed = replicate_seed(config.root_seed, r);
                Ok(engine::run_warmup_trace(&cfg, &model)?)
            })
            .collect::<Result<_>>()?;

        let n_windows = traces[0].len();
        let crossing = (0..n_windows).find_map(|w| {
            let bias = max_standardized_bias(&traces, w, &true_mean, &true_sd);
            (bias <= bias_threshold).then_some((w, bias, true))
        });
        let (window, bias, achieved) = crossing.unwrap_or_else(|| {
            let w = n_windows - 1;
            (
                w,
                max_standardized_bias(&traces, w, &true_mean, &true_sd),
                false,
            )
        });
        let mut grads: Vec<f64> = traces
            .iter()
            .map(|t| {
                let per_chain = &t[window].grad_evals_per_chain;
                per_chain.iter().sum::<u64>() as f64 / per_chain.len() as f64
            })
            .collect();
        let grads_per_chain = median(&mut grads);
        out.push_str(&format!(
            "{m},{},{},{}\n",
            float17(grads_per_chain),
            float17(bias),
            achieved
        ));
    }
    let path = ctx.path("sweep.csv");
    fs::write(&path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(CmdOutcome::Done)
}

/// Parameters of the oracle studies.
pub struct OracleParams {
    pub spec: OuProcessSpec,
    pub t_max: f64,
    pub t_step: f64,
    pub two_state_steps: usize,
    pub seed: u64,
}

/// Emits the analytic OU decay curve and the two-state kernel comparison.
pub fn cmd_oracle(ctx: &ExperimentContext, params: &OracleParams) -> Result<CmdOutcome> {
    let spec = &params.spec;
    spec.validate()?;
    if !(params.t_step > 0.0) || !(params.t_max >= 0.0) {
        return Err(Error::invalid("oracle time grid must be positive").into());
    }
    ctx.ensure_out_dir()?;

    let mut decay = String::from("t,bias,squared_bias,nonstationary_var,persistent_var,tv\n");
    let mut t = 0.0;
    while t <= params.t_max + 1e-12 {
        let decay_factor = (-t).exp();
        let bias = (spec.mu0 - spec.mu) * decay_factor;
        let nonstationary = spec.sigma0 * spec.sigma0 * decay_factor * decay_factor;
        let persistent = spec.sigma * spec.sigma * (1.0 - decay_factor * decay_factor);
        let (m_t, sd_t) = ou_marginal(spec, t)?;
        let tv = if sd_t == 0.0 {
            1.0
        } else {
            tv_normal(m_t, sd_t, spec.mu, spec.sigma)?
        };
        decay.push_str(&format!(
            "{},{},{},{},{},{}\n",
            float17(t),
            float17(bias),
            float17(bias * bias),
            float17(nonstationary),
            float17(persistent),
            float17(tv)
        ));
        t += params.t_step;
    }
    let decay_path = ctx.path("ou_decay.csv");
    fs::write(&decay_path, decay)
        .with_context(|| format!("writing {}", decay_path.display()))?;

    let qs: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
    let rows: Vec<String> = qs
        .par_iter()
        .enumerate()
        .map(|(i, &q)| -> Result<String> {
            let analytics = two_state_analytics(q)?;
            let chain = simulate_two_state(q, params.two_state_steps, params.seed + i as u64)?;
            let measured =
                diagnostics::ess(&[chain])? / params.two_state_steps as f64;
            Ok(format!(
                "{},{},{},{}\n",
                float17(q),
                float17(analytics.ess_per_draw),
                float17(measured),
                float17(analytics.tv_decay_factor)
            ))
        })
        .collect::<Result<_>>()?;
    let mut two_state = String::from(
        "q,ess_per_draw_analytic,ess_per_draw_measured,tv_decay_factor\n",
    );
    for row in rows {
        two_state.push_str(&row);
    }
    let ts_path = ctx.path("two_state.csv");
    fs::write(&ts_path, two_state)
        .with_context(|| format!("writing {}", ts_path.display()))?;
    Ok(CmdOutcome::Done)
}

/// Recomputes the diagnostics report from a stored draws file.
pub fn cmd_summarize(
    ctx: &ExperimentContext,
    draws_path: &Path,
    rhat_threshold: f64,
) -> Result<CmdOutcome> {
    let matrix = formats::read_draws(draws_path)?;
    let quantities = QuantityOfInterest::all_coordinates(matrix.dim());
    let report = diagnostics::summarize(&matrix, &quantities, rhat_threshold)?;
    ctx.ensure_out_dir()?;
    formats::write_summary(&ctx.out_dir, &report)?;
    Ok(CmdOutcome::Done)
}
