//! Run orchestration: initialization, deterministic per-chain randomness,
//! parallel warmup and sampling phases, the many-short-chains regime, and
//! target-ESS adaptive stopping.
//!
//! Chains execute on the ambient rayon pool. Every transition draws from a
//! stream keyed by (root_seed, chain, phase, iteration), and all cross-chain
//! reductions run sequentially in chain order after a join, so results are
//! bit-identical for a fixed config and seed regardless of worker count.

use std::ops::Range;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{
    self, ChainMatrix, ChainMeta, DiagnosticsReport, Phase, QuantityOfInterest,
};
use crate::error::{Error, Result};
use crate::model::TargetModel;
pub use crate::rng::derive_chain_rng;
use crate::rng::{tag, StreamRng};
use crate::samplers::{
    self, adapt_update, warmup_windows, AdaptationMode, ChainState, LeapfrogSearch, SamplerKind,
    TuningState, WindowStats,
};

/// Default initial step size before any adaptation.
pub const DEFAULT_INITIAL_STEP: f64 = 0.1;
/// Default fixed leapfrog count (per-chain adaptation keeps it).
pub const DEFAULT_LEAPFROG_STEPS: u32 = 8;
/// Overdispersed initialization draws at this multiple of the target's
/// largest marginal sd when the moments are known.
pub const OVERDISPERSION_FACTOR: f64 = 4.0;
/// Fallback overdispersed scale for targets without analytic moments.
pub const OVERDISPERSION_FALLBACK_SCALE: f64 = 10.0;
/// First adaptive sampling increment, doubled after each diagnostic check.
pub const INITIAL_ADAPTIVE_INCREMENT: usize = 100;

/// Where the chains start.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    /// theta0 ~ N(0, scale^2 I); scale defaults to 4x the largest marginal
    /// sd when known, else 10.
    Overdispersed { scale: Option<f64> },
    /// One fixed point per initialization group.
    FixedPoints(Vec<Vec<f64>>),
    /// theta0 ~ N(0, I).
    StandardNormal,
}

impl Default for InitStrategy {
    fn default() -> Self {
        InitStrategy::Overdispersed { scale: None }
    }
}

/// Control parameters of one engine run. Field names double as the JSON
/// config schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub chains: usize,
    pub warmup: usize,
    pub sampling: usize,
    /// Initialization-group count K; chains in a group share theta0 exactly.
    pub groups: usize,
    pub sampler: SamplerKind,
    pub adaptation: AdaptationMode,
    pub init: InitStrategy,
    pub root_seed: u64,
    /// epsilon in the convergence check R-hat <= 1 + epsilon.
    pub rhat_threshold: f64,
    pub target_ess: Option<f64>,
    /// Per-chain cap on warmup + sampling iterations in adaptive mode.
    pub max_total_iterations: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            chains: 4,
            warmup: 1000,
            sampling: 1000,
            groups: 1,
            sampler: SamplerKind::Hmc,
            adaptation: AdaptationMode::PerChain,
            init: InitStrategy::default(),
            root_seed: 0,
            rhat_threshold: diagnostics::DEFAULT_RHAT_THRESHOLD,
            target_ess: None,
            max_total_iterations: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self, model: &TargetModel) -> Result<()> {
        if self.chains == 0 {
            return Err(Error::invalid("need at least one chain"));
        }
        if self.sampling == 0 {
            return Err(Error::invalid("sampling length must be positive"));
        }
        if self.groups == 0 || self.chains % self.groups != 0 {
            return Err(Error::invalid(format!(
                "group count {} must divide the chain count {}",
                self.groups, self.chains
            )));
        }
        if !(self.rhat_threshold > 0.0) {
            return Err(Error::invalid("rhat threshold must be positive"));
        }
        if let Some(t) = self.target_ess {
            if !(t > 0.0) {
                return Err(Error::invalid("target ESS must be positive"));
            }
        }
        if let InitStrategy::FixedPoints(points) = &self.init {
            if points.len() != self.groups {
                return Err(Error::invalid(format!(
                    "fixed_points needs exactly {} entries (one per group), got {}",
                    self.groups,
                    points.len()
                )));
            }
            if points.iter().any(|p| p.len() != model.dim()) {
                return Err(Error::invalid("fixed_points dimension mismatch"));
            }
        }
        if let InitStrategy::Overdispersed { scale: Some(s) } = &self.init {
            if !(*s > 0.0) {
                return Err(Error::invalid("overdispersed scale must be positive"));
            }
        }
        Ok(())
    }

    fn chains_per_group(&self) -> usize {
        self.chains / self.groups
    }
}

/// A chain's starting point and group assignment.
#[derive(Clone, Debug)]
pub struct ChainInit {
    pub chain: usize,
    pub group: usize,
    pub position: Vec<f64>,
}

/// Draws the K group starting points and assigns chains to groups in
/// contiguous blocks. Group starts depend only on (root_seed, group), so
/// sweeps over the chain count reuse identical initializations.
pub fn initialize(config: &RunConfig, model: &TargetModel) -> Result<Vec<ChainInit>> {
    config.validate(model)?;
    let d = model.dim();
    let overdispersed_scale = match &config.init {
        InitStrategy::Overdispersed { scale } => scale.unwrap_or_else(|| {
            model
                .analytic_marginal_sd()
                .map(|sds| OVERDISPERSION_FACTOR * sds.iter().cloned().fold(0.0, f64::max))
                .unwrap_or(OVERDISPERSION_FALLBACK_SCALE)
        }),
        _ => 0.0,
    };

    let mut group_points = Vec::with_capacity(config.groups);
    for g in 0..config.groups {
        let mut rng = StreamRng::for_step(config.root_seed, g as u64, tag::INIT, 0);
        let point = match &config.init {
            InitStrategy::FixedPoints(points) => points[g].clone(),
            InitStrategy::StandardNormal => gaussian_vector(&mut rng, d, 1.0),
            InitStrategy::Overdispersed { .. } => {
                gaussian_vector(&mut rng, d, overdispersed_scale)
            }
        };
        group_points.push(point);
    }

    let cpg = config.chains_per_group();
    Ok((0..config.chains)
        .map(|m| {
            let group = m / cpg;
            ChainInit {
                chain: m,
                group,
                position: group_points[group].clone(),
            }
        })
        .collect())
}

fn gaussian_vector(rng: &mut StreamRng, d: usize, scale: f64) -> Vec<f64> {
    use rand::Rng;
    use rand_distr::StandardNormal;
    (0..d)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            scale * z
        })
        .collect()
}

/// Why a run stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StoppingReason {
    FixedBudget,
    TargetMet,
    BudgetExhausted,
}

/// Everything a run produces.
#[derive(Debug)]
pub struct RunResult {
    pub matrix: ChainMatrix,
    pub tunings: Vec<TuningState>,
    pub grad_evals_per_chain: Vec<u64>,
    pub warmup_secs: f64,
    pub sampling_secs: f64,
    pub report: DiagnosticsReport,
    pub stopping: StoppingReason,
    /// Adaptation windows whose variance estimate hit the floor.
    pub clamped_windows: u64,
}

impl RunResult {
    pub fn total_gradient_evals(&self) -> u64 {
        self.grad_evals_per_chain.iter().sum()
    }
}

struct ChainWorker {
    chain: usize,
    group: usize,
    state: ChainState,
    tuning: TuningState,
    draws: Vec<f64>,
    window: WindowStats,
    warmup_accepts: u64,
    warmup_steps: u64,
}

fn build_workers(config: &RunConfig, model: &TargetModel) -> Result<Vec<ChainWorker>> {
    let inits = initialize(config, model)?;
    let initial_leapfrog = match (config.adaptation, config.sampler) {
        (AdaptationMode::CrossChain, SamplerKind::Hmc) => samplers::LEAPFROG_GRID[0],
        _ => DEFAULT_LEAPFROG_STEPS,
    };
    inits
        .into_iter()
        .map(|init| {
            let rng = derive_chain_rng(config.root_seed, init.chain as u64);
            let state = ChainState::new(model, init.position, rng)?;
            Ok(ChainWorker {
                chain: init.chain,
                group: init.group,
                state,
                tuning: TuningState::new(model.dim(), DEFAULT_INITIAL_STEP, initial_leapfrog),
                draws: Vec::new(),
                window: WindowStats::default(),
                warmup_accepts: 0,
                warmup_steps: 0,
            })
        })
        .collect()
}

/// Runs `range` iterations on every chain in parallel. Iteration indices key
/// the random streams, so scheduling cannot affect the draws.
fn run_span(
    workers: &mut [ChainWorker],
    model: &TargetModel,
    config: &RunConfig,
    phase_tag: u64,
    range: Range<usize>,
    adapting: bool,
) -> Result<()> {
    let target = config.sampler.target_accept();
    workers.par_iter_mut().try_for_each(|wk| -> Result<()> {
        for iter in range.clone() {
            wk.state.rng =
                StreamRng::for_step(config.root_seed, wk.chain as u64, phase_tag, iter as u64);
            samplers::step(config.sampler, model, &mut wk.state, &wk.tuning)?;
            if adapting {
                wk.tuning
                    .dual_avg
                    .advance(wk.state.last_accept_prob, target);
                wk.tuning.step_size = wk.tuning.dual_avg.current();
                wk.window.sum_accept_prob += wk.state.last_accept_prob;
                wk.window.sum_jump_sq += wk.state.last_jump_sq;
                wk.window.iterations += 1;
            }
            wk.draws.extend_from_slice(&wk.state.position);
        }
        Ok(())
    })
}

/// Snapshot taken at a warmup window boundary, for bias-decay studies.
#[derive(Clone, Debug)]
pub struct WindowMeasurement {
    /// Warmup iterations completed at this boundary.
    pub end_iteration: usize,
    /// Per-dimension mean of the window's draws, pooled over chains.
    pub pooled_mean: Vec<f64>,
    /// Cumulative gradient evaluations of each chain at this boundary.
    pub grad_evals_per_chain: Vec<u64>,
}

fn warmup_phase(
    workers: &mut [ChainWorker],
    model: &TargetModel,
    config: &RunConfig,
    mut trace: Option<&mut Vec<WindowMeasurement>>,
) -> Result<u64> {
    let windows = warmup_windows(config.warmup);
    let mut clamped = 0u64;
    let mut lf_search = match (config.adaptation, config.sampler) {
        (AdaptationMode::CrossChain, SamplerKind::Hmc) => Some(LeapfrogSearch::new()),
        _ => None,
    };
    let dim = model.dim();

    for w in &windows {
        run_span(workers, model, config, tag::WARMUP, w.start..w.end, true)?;
        if let Some(trace) = trace.as_deref_mut() {
            let mut pooled_mean = vec![0.0; dim];
            for wk in workers.iter() {
                for row in wk.draws[w.start * dim..w.end * dim].chunks(dim) {
                    for i in 0..dim {
                        pooled_mean[i] += row[i];
                    }
                }
            }
            let count = (workers.len() * w.len()) as f64;
            for v in &mut pooled_mean {
                *v /= count;
            }
            trace.push(WindowMeasurement {
                end_iteration: w.end,
                pooled_mean,
                grad_evals_per_chain: workers.iter().map(|wk| wk.state.grad_evals).collect(),
            });
        }
        if w.update_preconditioner {
            // Barrier: every chain has finished the window.
            let window_draws: Vec<Vec<Vec<f64>>> = workers
                .iter()
                .map(|wk| {
                    let from = w.start * dim;
                    let to = w.end * dim;
                    wk.draws[from..to].chunks(dim).map(|c| c.to_vec()).collect()
                })
                .collect();
            let stats: Vec<WindowStats> = workers.iter().map(|wk| wk.window).collect();
            let mut tunings: Vec<TuningState> =
                workers.iter().map(|wk| wk.tuning.clone()).collect();
            let outcome = adapt_update(
                &mut tunings,
                &window_draws,
                &stats,
                config.adaptation,
                config.sampler,
                lf_search.as_mut(),
            )?;
            clamped += u64::from(outcome.clamped);
            for (wk, tuning) in workers.iter_mut().zip(tunings) {
                wk.tuning = tuning;
            }
        }
        for wk in workers.iter_mut() {
            wk.window = WindowStats::default();
        }
    }

    // Freeze. Cross-chain mode leaves warmup with one shared step size.
    match config.adaptation {
        AdaptationMode::PerChain => {
            for wk in workers.iter_mut() {
                samplers::freeze(std::slice::from_mut(&mut wk.tuning));
            }
        }
        AdaptationMode::CrossChain => {
            let mean_log = workers
                .iter()
                .map(|wk| wk.tuning.dual_avg.adapted().ln())
                .sum::<f64>()
                / workers.len() as f64;
            let shared = mean_log.exp();
            for wk in workers.iter_mut() {
                wk.tuning.step_size = shared;
                wk.tuning.frozen = true;
            }
        }
    }
    for wk in workers.iter_mut() {
        wk.warmup_accepts = wk.state.accept_count;
        wk.warmup_steps = wk.state.step_count;
    }
    Ok(clamped)
}

fn assemble_matrix(
    workers: &[ChainWorker],
    config: &RunConfig,
    dim: usize,
    sampling_done: usize,
) -> Result<ChainMatrix> {
    let total = config.warmup + sampling_done;
    let mut draws = Vec::with_capacity(workers.len() * total * dim);
    for wk in workers {
        draws.extend_from_slice(&wk.draws);
    }
    let mut phases = vec![Phase::Warmup; config.warmup];
    phases.extend(std::iter::repeat(Phase::Sampling).take(sampling_done));
    let groups: Vec<usize> = workers.iter().map(|wk| wk.group).collect();
    let meta: Vec<ChainMeta> = workers
        .iter()
        .map(|wk| {
            let steps = wk.state.step_count - wk.warmup_steps;
            let accepts = wk.state.accept_count - wk.warmup_accepts;
            ChainMeta {
                seed: derive_chain_rng(config.root_seed, wk.chain as u64).key(),
                divergences: wk.state.divergences,
                acceptance_rate: if steps == 0 {
                    0.0
                } else {
                    accepts as f64 / steps as f64
                },
                gradient_evals: wk.state.grad_evals,
            }
        })
        .collect();
    ChainMatrix::new(draws, workers.len(), total, dim, phases, groups, meta)
}

fn finish(
    workers: Vec<ChainWorker>,
    config: &RunConfig,
    model: &TargetModel,
    quantities: &[QuantityOfInterest],
    sampling_done: usize,
    warmup_secs: f64,
    sampling_secs: f64,
    stopping: StoppingReason,
    clamped_windows: u64,
) -> Result<RunResult> {
    let matrix = assemble_matrix(&workers, config, model.dim(), sampling_done)?;
    let report = diagnostics::summarize(&matrix, quantities, config.rhat_threshold)?;
    Ok(RunResult {
        matrix,
        grad_evals_per_chain: workers.iter().map(|wk| wk.state.grad_evals).collect(),
        tunings: workers.into_iter().map(|wk| wk.tuning).collect(),
        warmup_secs,
        sampling_secs,
        report,
        stopping,
        clamped_windows,
    })
}

fn default_quantities(model: &TargetModel) -> Vec<QuantityOfInterest> {
    QuantityOfInterest::all_coordinates(model.dim())
}

/// Fixed-budget run: warmup with adaptation, freeze, then exactly
/// `config.sampling` draws per chain.
pub fn run(
    config: &RunConfig,
    model: &TargetModel,
    quantities: &[QuantityOfInterest],
) -> Result<RunResult> {
    config.validate(model)?;
    let owned;
    let quantities = if quantities.is_empty() {
        owned = default_quantities(model);
        &owned
    } else {
        quantities
    };

    let mut workers = build_workers(config, model)?;
    let t0 = Instant::now();
    let clamped = warmup_phase(&mut workers, model, config, None)?;
    let warmup_secs = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    run_span(&mut workers, model, config, tag::SAMPLING, 0..config.sampling, false)?;
    let sampling_secs = t1.elapsed().as_secs_f64();

    finish(
        workers,
        config,
        model,
        quantities,
        config.sampling,
        warmup_secs,
        sampling_secs,
        StoppingReason::FixedBudget,
        clamped,
    )
}

/// Many-short-chains mode: the same contract as [`run`], used with a large
/// chain count and a short (possibly single-draw) sampling phase. With one
/// draw per chain the ESS comes from the independent-chains path, so the
/// chain count alone carries the variance reduction.
pub fn run_many_short(
    config: &RunConfig,
    model: &TargetModel,
    quantities: &[QuantityOfInterest],
) -> Result<RunResult> {
    run(config, model, quantities)
}

/// Runs the warmup phase alone and reports, at every adaptation-window
/// boundary, the chain-pooled mean estimate and the cumulative gradient
/// evaluations. This is the measurement behind chain-count sweeps: how much
/// work per chain until the warmup bias falls below a target.
pub fn run_warmup_trace(config: &RunConfig, model: &TargetModel) -> Result<Vec<WindowMeasurement>> {
    config.validate(model)?;
    if config.warmup == 0 {
        return Err(Error::invalid("warmup trace needs a nonzero warmup"));
    }
    let mut workers = build_workers(config, model)?;
    let mut trace = Vec::new();
    warmup_phase(&mut workers, model, config, Some(&mut trace))?;
    Ok(trace)
}

/// Target-ESS adaptive run: after warmup, sampling proceeds in doubling
/// increments until every quantity's measured ESS reaches the target and
/// every R-hat is within the threshold, or the iteration budget runs out.
pub fn run_adaptive(
    config: &RunConfig,
    model: &TargetModel,
    quantities: &[QuantityOfInterest],
) -> Result<RunResult> {
    config.validate(model)?;
    let target_ess = config
        .target_ess
        .ok_or_else(|| Error::invalid("adaptive mode requires target_ess"))?;
    let budget = config
        .max_total_iterations
        .ok_or_else(|| Error::invalid("adaptive mode requires max_total_iterations"))?;
    if budget <= config.warmup as u64 {
        return Err(Error::invalid(
            "max_total_iterations must exceed the warmup length",
        ));
    }
    let owned;
    let quantities = if quantities.is_empty() {
        owned = default_quantities(model);
        &owned
    } else {
        quantities
    };

    let mut workers = build_workers(config, model)?;
    let t0 = Instant::now();
    let clamped = warmup_phase(&mut workers, model, config, None)?;
    let warmup_secs = t0.elapsed().as_secs_f64();

    let sampling_budget = (budget - config.warmup as u64) as usize;
    let mut done = 0usize;
    let mut increment = INITIAL_ADAPTIVE_INCREMENT.min(sampling_budget);
    let t1 = Instant::now();
    let stopping = loop {
        run_span(
            &mut workers,
            model,
            config,
            tag::SAMPLING,
            done..done + increment,
            false,
        )?;
        done += increment;

        let matrix = assemble_matrix(&workers, config, model.dim(), done)?;
        let report = diagnostics::summarize(&matrix, quantities, config.rhat_threshold)?;
        if report.min_ess() >= target_ess
            && report.max_rhat() <= 1.0 + config.rhat_threshold
        {
            break StoppingReason::TargetMet;
        }
        let remaining = sampling_budget - done;
        if remaining == 0 {
            break StoppingReason::BudgetExhausted;
        }
        increment = (increment * 2).min(remaining);
    };
    let sampling_secs = t1.elapsed().as_secs_f64();

    finish(
        workers,
        config,
        model,
        quantities,
        done,
        warmup_secs,
        sampling_secs,
        stopping,
        clamped,
    )
}

/// Dispatches on the config: adaptive when a target ESS is set, fixed
/// budget otherwise.
pub fn execute(
    config: &RunConfig,
    model: &TargetModel,
    quantities: &[QuantityOfInterest],
) -> Result<RunResult> {
    if config.target_ess.is_some() {
        run_adaptive(config, model, quantities)
    } else {
        run(config, model, quantities)
    }
}
