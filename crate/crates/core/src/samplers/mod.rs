//! MCMC transition kernels: random-walk Metropolis, MALA, and fixed-length
//! HMC, all sharing one diagonal preconditioner convention.
//!
//! The preconditioner entries estimate marginal target variances. RWM scales
//! proposals by step_size * sqrt(P); MALA proposes
//! q + (eps^2/2) P grad + eps sqrt(P) xi; HMC draws momenta with covariance
//! P^-1 and drifts q by eps P p, so all three step in the same standardized
//! units.

mod adapt;

pub use adapt::{
    adapt_update, freeze, warmup_windows, AdaptOutcome, AdaptationMode, DualAverage,
    LeapfrogSearch, WindowSpec, WindowStats, LEAPFROG_GRID,
};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::TargetModel;
use crate::rng::StreamRng;

/// Hamiltonian error above which a trajectory is declared divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;

/// Kernel selection token, as written in configs and on the CLI.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Rwm,
    Mala,
    Hmc,
}

impl SamplerKind {
    /// Optimal-scaling acceptance targets the step-size adaptation aims for.
    pub fn target_accept(self) -> f64 {
        match self {
            SamplerKind::Rwm => 0.234,
            SamplerKind::Mala => 0.574,
            SamplerKind::Hmc => 0.80,
        }
    }

    pub fn parse(token: &str) -> Result<Self> {
        match token {
            "rwm" => Ok(SamplerKind::Rwm),
            "mala" => Ok(SamplerKind::Mala),
            "hmc" => Ok(SamplerKind::Hmc),
            other => Err(Error::invalid(format!(
                "unknown sampler '{other}' (expected rwm, mala, or hmc)"
            ))),
        }
    }
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SamplerKind::Rwm => "rwm",
            SamplerKind::Mala => "mala",
            SamplerKind::Hmc => "hmc",
        })
    }
}

/// One chain's mutable state between transitions.
#[derive(Clone, Debug)]
pub struct ChainState {
    pub position: Vec<f64>,
    pub rng: StreamRng,
    pub accept_count: u64,
    pub step_count: u64,
    pub last_log_density: f64,
    pub divergences: u64,
    /// Acceptance probability of the most recent proposal.
    pub last_accept_prob: f64,
    /// Preconditioner-standardized squared jump of the most recent step.
    pub last_jump_sq: f64,
    /// Gradient evaluations this chain has requested.
    pub grad_evals: u64,
}

impl ChainState {
    pub fn new(model: &TargetModel, position: Vec<f64>, rng: StreamRng) -> Result<Self> {
        let lp = model.log_density(&position)?;
        if !lp.is_finite() {
            return Err(Error::BadInitialPoint {
                position,
                message: format!("log density is {lp}"),
            });
        }
        Ok(ChainState {
            position,
            rng,
            accept_count: 0,
            step_count: 0,
            last_log_density: lp,
            divergences: 0,
            last_accept_prob: 0.0,
            last_jump_sq: 0.0,
            grad_evals: 0,
        })
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.step_count == 0 {
            0.0
        } else {
            self.accept_count as f64 / self.step_count as f64
        }
    }
}

/// Tuning parameters, frozen at the end of warmup.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TuningState {
    pub step_size: f64,
    pub diag_preconditioner: Vec<f64>,
    pub num_leapfrog_steps: u32,
    pub frozen: bool,
    pub dual_avg: DualAverage,
}

impl TuningState {
    pub fn new(dim: usize, initial_step: f64, num_leapfrog_steps: u32) -> Self {
        TuningState {
            step_size: initial_step,
            diag_preconditioner: vec![1.0; dim],
            num_leapfrog_steps,
            frozen: false,
            dual_avg: DualAverage::new(initial_step),
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if !(self.step_size > 0.0) {
            return Err(Error::invalid("step size must be positive"));
        }
        if self.diag_preconditioner.len() != dim {
            return Err(Error::invalid("preconditioner dimension mismatch"));
        }
        if self.diag_preconditioner.iter().any(|p| !(*p > 0.0)) {
            return Err(Error::invalid("preconditioner entries must be positive"));
        }
        if self.num_leapfrog_steps == 0 {
            return Err(Error::invalid("leapfrog step count must be positive"));
        }
        Ok(())
    }
}

/// End state of a completed leapfrog trajectory.
#[derive(Clone, Debug)]
pub struct LeapfrogEnd {
    pub position: Vec<f64>,
    pub momentum: Vec<f64>,
    pub log_density: f64,
}

/// A leapfrog trajectory with its exact gradient-evaluation cost. `end` is
/// `None` when a non-finite gradient or density was encountered mid-flight
/// (a divergent trajectory); `grad_evals` still counts the evaluations
/// actually performed.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub end: Option<LeapfrogEnd>,
    pub grad_evals: u64,
}

/// Integrates `steps` leapfrog updates of the preconditioned Hamiltonian.
pub fn leapfrog(
    model: &TargetModel,
    q: &[f64],
    p: &[f64],
    step_size: f64,
    steps: u32,
    preconditioner: &[f64],
) -> Result<Trajectory> {
    let d = model.dim();
    if q.len() != d || p.len() != d || preconditioner.len() != d {
        return Err(Error::invalid("leapfrog dimension mismatch"));
    }
    if !(step_size > 0.0) {
        return Err(Error::invalid("leapfrog step size must be positive"));
    }
    if steps == 0 {
        return Err(Error::invalid("leapfrog needs at least one step"));
    }

    let mut q = q.to_vec();
    let mut p = p.to_vec();
    let mut grad = vec![0.0; d];
    let mut evals = 0u64;

    let mut lp = model.evaluate_into(&q, &mut grad)?;
    evals += 1;
    if !lp.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Ok(Trajectory { end: None, grad_evals: evals });
    }

    let half = 0.5 * step_size;
    for _ in 0..steps {
        for i in 0..d {
            p[i] += half * grad[i];
        }
        for i in 0..d {
            q[i] += step_size * preconditioner[i] * p[i];
        }
        lp = model.evaluate_into(&q, &mut grad)?;
        evals += 1;
        if !lp.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Ok(Trajectory { end: None, grad_evals: evals });
        }
        for i in 0..d {
            p[i] += half * grad[i];
        }
    }

    Ok(Trajectory {
        end: Some(LeapfrogEnd {
            position: q,
            momentum: p,
            log_density: lp,
        }),
        grad_evals: evals,
    })
}

fn kinetic_energy(p: &[f64], preconditioner: &[f64]) -> f64 {
    p.iter()
        .zip(preconditioner)
        .map(|(pi, pr)| 0.5 * pr * pi * pi)
        .sum()
}

fn standardized_jump(a: &[f64], b: &[f64], preconditioner: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(preconditioner)
        .map(|((x, y), pr)| {
            let d = y - x;
            d * d / pr
        })
        .sum()
}

/// Relative step-size jitter for HMC trajectories. A frozen (step_size,
/// leapfrog count) pair on a near-Gaussian target makes every dimension
/// oscillate at a fixed angle, so dimensions near a full period barely move;
/// jittering the step size per transition breaks the resonance.
pub const HMC_STEP_JITTER: f64 = 0.2;

/// One Hamiltonian Monte Carlo transition with a fixed leapfrog count and
/// a jittered step size.
pub fn hmc_step(model: &TargetModel, state: &mut ChainState, tuning: &TuningState) -> Result<()> {
    let d = model.dim();
    tuning.validate(d)?;

    let momentum: Vec<f64> = tuning
        .diag_preconditioner
        .iter()
        .map(|pr| {
            let z: f64 = state.rng.sample(StandardNormal);
            z / pr.sqrt()
        })
        .collect();
    let h0 = -state.last_log_density + kinetic_energy(&momentum, &tuning.diag_preconditioner);

    let u: f64 = state.rng.random();
    let step_size = tuning.step_size * (1.0 + HMC_STEP_JITTER * (2.0 * u - 1.0));
    let trajectory = leapfrog(
        model,
        &state.position,
        &momentum,
        step_size,
        tuning.num_leapfrog_steps,
        &tuning.diag_preconditioner,
    )?;

    state.step_count += 1;
    state.grad_evals += trajectory.grad_evals;
    let end = match trajectory.end {
        Some(end) => end,
        None => {
            // Divergent: the gradient blew up mid-trajectory.
            state.divergences += 1;
            state.last_accept_prob = 0.0;
            state.last_jump_sq = 0.0;
            return Ok(());
        }
    };

    let h1 = -end.log_density + kinetic_energy(&end.momentum, &tuning.diag_preconditioner);
    let delta_h = h1 - h0;
    if !delta_h.is_finite() || delta_h.abs() > DIVERGENCE_THRESHOLD {
        state.divergences += 1;
        state.last_accept_prob = 0.0;
        state.last_jump_sq = 0.0;
        return Ok(());
    }

    let accept_prob = (-delta_h).exp().min(1.0);
    state.last_accept_prob = accept_prob;
    let u: f64 = state.rng.random();
    if u < accept_prob {
        state.last_jump_sq =
            standardized_jump(&state.position, &end.position, &tuning.diag_preconditioner);
        state.position = end.position;
        state.last_log_density = end.log_density;
        state.accept_count += 1;
    } else {
        state.last_jump_sq = 0.0;
    }
    Ok(())
}

/// One Metropolis-adjusted Langevin transition.
pub fn mala_step(model: &TargetModel, state: &mut ChainState, tuning: &TuningState) -> Result<()> {
    let d = model.dim();
    tuning.validate(d)?;
    let eps = tuning.step_size;
    let eps2 = eps * eps;
    let pre = &tuning.diag_preconditioner;

    let mut grad = vec![0.0; d];
    let lp_cur = model.evaluate_into(&state.position, &mut grad)?;
    state.grad_evals += 1;

    // Forward proposal mean and draw.
    let mut proposal = vec![0.0; d];
    let mut fwd_mean = vec![0.0; d];
    for i in 0..d {
        fwd_mean[i] = state.position[i] + 0.5 * eps2 * pre[i] * grad[i];
        let z: f64 = state.rng.sample(StandardNormal);
        proposal[i] = fwd_mean[i] + eps * pre[i].sqrt() * z;
    }

    state.step_count += 1;
    let mut grad_prop = vec![0.0; d];
    let lp_prop = model.evaluate_into(&proposal, &mut grad_prop)?;
    state.grad_evals += 1;
    if !lp_prop.is_finite() || grad_prop.iter().any(|g| !g.is_finite()) {
        state.divergences += 1;
        state.last_accept_prob = 0.0;
        state.last_jump_sq = 0.0;
        return Ok(());
    }

    // Asymmetric-proposal correction: quadratic forms of the forward and
    // reverse Gaussian kernels (shared constants cancel).
    let mut log_q_fwd = 0.0;
    let mut log_q_rev = 0.0;
    for i in 0..d {
        let fwd = proposal[i] - fwd_mean[i];
        let rev_mean = proposal[i] + 0.5 * eps2 * pre[i] * grad_prop[i];
        let rev = state.position[i] - rev_mean;
        log_q_fwd -= fwd * fwd / (2.0 * eps2 * pre[i]);
        log_q_rev -= rev * rev / (2.0 * eps2 * pre[i]);
    }

    let log_alpha = lp_prop - lp_cur + log_q_rev - log_q_fwd;
    let accept_prob = log_alpha.min(0.0).exp();
    state.last_accept_prob = accept_prob;
    let u: f64 = state.rng.random();
    if u < accept_prob {
        state.last_jump_sq = standardized_jump(&state.position, &proposal, pre);
        state.position = proposal;
        state.last_log_density = lp_prop;
        state.accept_count += 1;
    } else {
        state.last_jump_sq = 0.0;
    }
    Ok(())
}

/// One random-walk Metropolis transition with a symmetric Gaussian proposal.
pub fn rwm_step(model: &TargetModel, state: &mut ChainState, tuning: &TuningState) -> Result<()> {
    let d = model.dim();
    tuning.validate(d)?;

    let proposal: Vec<f64> = state
        .position
        .iter()
        .zip(&tuning.diag_preconditioner)
        .map(|(x, pr)| {
            let z: f64 = state.rng.sample(StandardNormal);
            x + tuning.step_size * pr.sqrt() * z
        })
        .collect();

    state.step_count += 1;
    let lp_prop = model.log_density(&proposal)?;
    if !lp_prop.is_finite() {
        state.divergences += 1;
        state.last_accept_prob = 0.0;
        state.last_jump_sq = 0.0;
        return Ok(());
    }

    let accept_prob = (lp_prop - state.last_log_density).min(0.0).exp();
    state.last_accept_prob = accept_prob;
    let u: f64 = state.rng.random();
    if u < accept_prob {
        state.last_jump_sq =
            standardized_jump(&state.position, &proposal, &tuning.diag_preconditioner);
        state.position = proposal;
        state.last_log_density = lp_prop;
        state.accept_count += 1;
    } else {
        state.last_jump_sq = 0.0;
    }
    Ok(())
}

/// Dispatches one transition of the selected kernel.
pub fn step(
    kind: SamplerKind,
    model: &TargetModel,
    state: &mut ChainState,
    tuning: &TuningState,
) -> Result<()> {
    match kind {
        SamplerKind::Rwm => rwm_step(model, state, tuning),
        SamplerKind::Mala => mala_step(model, state, tuning),
        SamplerKind::Hmc => hmc_step(model, state, tuning),
    }
}
