//! Warmup-phase adaptation: dual-averaging step sizes, windowed diagonal
//! preconditioner estimation, and cross-chain pooling.
//!
//! Windows follow the doubling schedule 25, 25, 50, 100, ... with a final
//! 50-iteration step-size-only window; the preconditioner updates at window
//! boundaries. In cross-chain mode the boundary is a barrier: draws from all
//! chains are pooled into one variance estimate, step sizes are pooled
//! geometrically, and (for HMC) the leapfrog count is reselected from a fixed
//! grid by measured squared jump distance per gradient evaluation. After a
//! cross-chain update every chain carries the same tuning state.

use serde::{Deserialize, Serialize};

use super::{SamplerKind, TuningState};
use crate::error::{Error, Result};

/// How tuning information flows between chains during warmup.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptationMode {
    PerChain,
    CrossChain,
}

impl AdaptationMode {
    pub fn parse(token: &str) -> Result<Self> {
        match token {
            "per-chain" | "per_chain" => Ok(AdaptationMode::PerChain),
            "cross-chain" | "cross_chain" => Ok(AdaptationMode::CrossChain),
            other => Err(Error::invalid(format!(
                "unknown adaptation mode '{other}' (expected per-chain or cross-chain)"
            ))),
        }
    }
}

impl std::fmt::Display for AdaptationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AdaptationMode::PerChain => "per-chain",
            AdaptationMode::CrossChain => "cross-chain",
        })
    }
}

/// Nesterov dual averaging on the log step size.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DualAverage {
    mu: f64,
    log_step: f64,
    log_step_avg: f64,
    h_bar: f64,
    count: u64,
}

const GAMMA: f64 = 0.05;
const T0: f64 = 10.0;
const KAPPA: f64 = 0.75;

impl DualAverage {
    pub fn new(initial_step: f64) -> Self {
        DualAverage {
            mu: (10.0 * initial_step).ln(),
            log_step: initial_step.ln(),
            log_step_avg: initial_step.ln(),
            h_bar: 0.0,
            count: 1,
        }
    }

    pub fn advance(&mut self, accept_prob: f64, target: f64) {
        let t = self.count as f64;
        let w = 1.0 / (t + T0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (target - accept_prob);
        self.log_step = self.mu - self.h_bar * t.sqrt() / GAMMA;
        let eta = t.powf(-KAPPA);
        self.log_step_avg = eta * self.log_step + (1.0 - eta) * self.log_step_avg;
        self.count += 1;
    }

    /// The live step size used while adapting.
    pub fn current(&self) -> f64 {
        self.log_step.exp()
    }

    /// The smoothed step size, frozen in at the end of warmup.
    pub fn adapted(&self) -> f64 {
        self.log_step_avg.exp()
    }

    /// Merges per-chain searches into one shared state (cross-chain pooling).
    fn pooled(states: &[&DualAverage]) -> DualAverage {
        let n = states.len() as f64;
        DualAverage {
            mu: states.iter().map(|s| s.mu).sum::<f64>() / n,
            log_step: states.iter().map(|s| s.log_step).sum::<f64>() / n,
            log_step_avg: states.iter().map(|s| s.log_step_avg).sum::<f64>() / n,
            h_bar: states.iter().map(|s| s.h_bar).sum::<f64>() / n,
            count: states.iter().map(|s| s.count).max().unwrap_or(1),
        }
    }
}

/// One warmup window. The preconditioner updates only at the end of windows
/// with `update_preconditioner` set; the first and last windows adapt the
/// step size alone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub start: usize,
    pub end: usize,
    pub update_preconditioner: bool,
}

impl WindowSpec {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

const INIT_WINDOW: usize = 25;
const TERM_WINDOW: usize = 50;
const FIRST_SLOW_WINDOW: usize = 25;

/// Window schedule covering `warmup` iterations exactly.
pub fn warmup_windows(warmup: usize) -> Vec<WindowSpec> {
    if warmup == 0 {
        return Vec::new();
    }
    if warmup < INIT_WINDOW + FIRST_SLOW_WINDOW + TERM_WINDOW {
        return vec![WindowSpec {
            start: 0,
            end: warmup,
            update_preconditioner: false,
        }];
    }
    let slow_end = warmup - TERM_WINDOW;
    let mut windows = vec![WindowSpec {
        start: 0,
        end: INIT_WINDOW,
        update_preconditioner: false,
    }];
    let mut start = INIT_WINDOW;
    let mut size = FIRST_SLOW_WINDOW;
    while start < slow_end {
        let mut end = start + size;
        // Absorb the remainder once the next doubled window cannot fit.
        if end + 2 * size > slow_end {
            end = slow_end;
        }
        windows.push(WindowSpec {
            start,
            end,
            update_preconditioner: true,
        });
        start = end;
        size *= 2;
    }
    windows.push(WindowSpec {
        start: slow_end,
        end: warmup,
        update_preconditioner: false,
    });
    windows
}

/// Per-chain accumulators over one adaptation window.
#[derive(Clone, Copy, Debug, Default)]
pub struct WindowStats {
    pub sum_accept_prob: f64,
    /// Sum of preconditioner-standardized squared jumps.
    pub sum_jump_sq: f64,
    pub iterations: u64,
}

impl WindowStats {
    pub fn mean_accept(&self) -> f64 {
        if self.iterations == 0 {
            0.0
        } else {
            self.sum_accept_prob / self.iterations as f64
        }
    }
}

/// Candidate leapfrog counts for cross-chain HMC adaptation.
pub const LEAPFROG_GRID: [u32; 6] = [1, 2, 4, 8, 16, 32];

/// Doubling search over [`LEAPFROG_GRID`] scored by measured expected squared
/// jump distance per gradient evaluation. Climbs while each new rung improves
/// on the previous one, then settles on the measured argmax.
#[derive(Clone, Debug)]
pub struct LeapfrogSearch {
    scores: [Option<f64>; 6],
    climbing: bool,
}

impl Default for LeapfrogSearch {
    fn default() -> Self {
        Self::new()
    }
}

impl LeapfrogSearch {
    pub fn new() -> Self {
        LeapfrogSearch {
            scores: [None; 6],
            climbing: true,
        }
    }

    fn grid_index(l: u32) -> usize {
        LEAPFROG_GRID.iter().position(|g| *g == l).unwrap_or(0)
    }

    /// Records the score measured with `current` steps and returns the count
    /// for the next window.
    pub fn record_and_select(&mut self, current: u32, esjd_per_grad: f64) -> u32 {
        let idx = Self::grid_index(current);
        self.scores[idx] = Some(esjd_per_grad);
        if self.climbing {
            let improved = idx == 0
                || match (self.scores[idx], self.scores[idx - 1]) {
                    (Some(new), Some(prev)) => new >= prev,
                    _ => true,
                };
            if improved && idx + 1 < LEAPFROG_GRID.len() {
                return LEAPFROG_GRID[idx + 1];
            }
            self.climbing = false;
        }
        let best = self
            .scores
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.map(|v| (i, v)))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        LEAPFROG_GRID[best]
    }
}

/// Result of one boundary update.
#[derive(Clone, Copy, Debug, Default)]
pub struct AdaptOutcome {
    /// A zero-variance window forced a preconditioner entry to the floor.
    pub clamped: bool,
}

const PRECONDITIONER_FLOOR: f64 = 1e-10;

fn marginal_variances(draws: &[&[f64]], dim: usize) -> Option<Vec<f64>> {
    let n = draws.len();
    if n < 2 {
        return None;
    }
    let mut means = vec![0.0; dim];
    for row in draws {
        for i in 0..dim {
            means[i] += row[i];
        }
    }
    for m in &mut means {
        *m /= n as f64;
    }
    let mut vars = vec![0.0; dim];
    for row in draws {
        for i in 0..dim {
            let d = row[i] - means[i];
            vars[i] += d * d;
        }
    }
    for v in &mut vars {
        *v /= (n - 1) as f64;
    }
    Some(vars)
}

fn clamp_preconditioner(vars: &mut [f64]) -> bool {
    let mut clamped = false;
    for v in vars {
        if !(*v > PRECONDITIONER_FLOOR) {
            *v = PRECONDITIONER_FLOOR;
            clamped = true;
        }
    }
    clamped
}

/// Window-boundary adaptation update.
///
/// Advances each chain's dual averaging toward the kernel's target acceptance
/// rate, re-estimates the diagonal preconditioner from the window draws
/// (per-chain windows, or the pooled window across chains), and re-anchors the
/// step-size search. In cross-chain mode all chains leave with one shared
/// tuning state, and `leapfrog_search`, when given, reselects the HMC
/// leapfrog count from the candidate grid.
pub fn adapt_update(
    tunings: &mut [TuningState],
    window_draws: &[Vec<Vec<f64>>],
    accept_stats: &[WindowStats],
    mode: AdaptationMode,
    kind: SamplerKind,
    mut leapfrog_search: Option<&mut LeapfrogSearch>,
) -> Result<AdaptOutcome> {
    let chains = tunings.len();
    if chains == 0 || window_draws.len() != chains || accept_stats.len() != chains {
        return Err(Error::invalid("adapt_update: per-chain inputs must align"));
    }
    if tunings.iter().any(|t| t.frozen) {
        return Err(Error::ContractViolation(
            "adapt_update called on frozen tuning state".into(),
        ));
    }
    let target = kind.target_accept();
    let mut outcome = AdaptOutcome::default();

    match mode {
        AdaptationMode::PerChain => {
            for c in 0..chains {
                tunings[c].dual_avg.advance(accept_stats[c].mean_accept(), target);
                let rows: Vec<&[f64]> =
                    window_draws[c].iter().map(|r| r.as_slice()).collect();
                if let Some(mut vars) =
                    marginal_variances(&rows, tunings[c].diag_preconditioner.len())
                {
                    outcome.clamped |= clamp_preconditioner(&mut vars);
                    tunings[c].diag_preconditioner = vars;
                }
                tunings[c].step_size = tunings[c].dual_avg.current();
            }
        }
        AdaptationMode::CrossChain => {
            let total_iters: u64 = accept_stats.iter().map(|s| s.iterations).sum();
            let pooled_accept = if total_iters == 0 {
                0.0
            } else {
                accept_stats.iter().map(|s| s.sum_accept_prob).sum::<f64>()
                    / total_iters as f64
            };
            for t in tunings.iter_mut() {
                t.dual_avg.advance(pooled_accept, target);
            }
            let shared_dual_avg =
                DualAverage::pooled(&tunings.iter().map(|t| &t.dual_avg).collect::<Vec<_>>());
            let new_step = shared_dual_avg.current();

            // Pooling is concatenation: one variance over all chains' rows.
            let rows: Vec<&[f64]> = window_draws
                .iter()
                .flat_map(|c| c.iter().map(|r| r.as_slice()))
                .collect();
            let dim = tunings[0].diag_preconditioner.len();
            let pooled_vars = marginal_variances(&rows, dim);

            let next_leapfrog = match (&mut leapfrog_search, kind) {
                (Some(search), SamplerKind::Hmc) => {
                    let current = tunings[0].num_leapfrog_steps;
                    let grads_per_iter = (current + 1) as f64;
                    let mean_jump = if total_iters == 0 {
                        0.0
                    } else {
                        accept_stats.iter().map(|s| s.sum_jump_sq).sum::<f64>()
                            / total_iters as f64
                    };
                    Some(search.record_and_select(current, mean_jump / grads_per_iter))
                }
                _ => None,
            };

            for t in tunings.iter_mut() {
                if let Some(vars) = &pooled_vars {
                    let mut vars = vars.clone();
                    outcome.clamped |= clamp_preconditioner(&mut vars);
                    t.diag_preconditioner = vars;
                }
                if let Some(l) = next_leapfrog {
                    t.num_leapfrog_steps = l;
                }
                t.step_size = new_step;
                t.dual_avg = shared_dual_avg.clone();
            }
        }
    }
    Ok(outcome)
}

/// Freezes every tuning state at its smoothed step size. No field may change
/// afterwards.
pub fn freeze(tunings: &mut [TuningState]) {
    for t in tunings.iter_mut() {
        t.step_size = t.dual_avg.adapted();
        t.frozen = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dual_average_moves_with_the_acceptance_gap() {
        let mut up = DualAverage::new(0.1);
        up.advance(0.95, 0.8);
        assert!(up.current() > 0.1, "acceptance above target must grow the step");

        // Monotone in the observed acceptance: more acceptance, bigger step.
        let mut lo = DualAverage::new(0.1);
        lo.advance(0.3, 0.8);
        assert!(lo.current() < up.current());

        // Once the shrinkage anchor has faded, a below-target window shrinks
        // the step outright.
        let mut settled = DualAverage::new(0.1);
        for _ in 0..50 {
            settled.advance(0.8, 0.8);
        }
        let before = settled.current();
        settled.advance(0.3, 0.8);
        assert!(settled.current() < before);
    }

    #[test]
    fn dual_average_converges_on_a_synthetic_response() {
        // Acceptance falls with the step size; the fixed point of
        // accept(eps) = 0.8 is eps = 0.5.
        let accept = |eps: f64| (-eps * (0.8f64.ln().abs() / 0.5)).exp();
        let mut da = DualAverage::new(0.05);
        for _ in 0..2000 {
            da.advance(accept(da.current()), 0.8);
        }
        let eps = da.adapted();
        assert!((0.4..=0.6).contains(&eps), "adapted step {eps}");
    }

    #[test]
    fn window_schedule_matches_doubling_layout() {
        let w = warmup_windows(1000);
        let spans: Vec<(usize, usize, bool)> =
            w.iter().map(|s| (s.start, s.end, s.update_preconditioner)).collect();
        assert_eq!(
            spans,
            vec![
                (0, 25, false),
                (25, 50, true),
                (50, 100, true),
                (100, 200, true),
                (200, 400, true),
                (400, 950, true),
                (950, 1000, false),
            ]
        );
    }

    #[test]
    fn window_schedule_covers_any_length() {
        for warmup in [0, 1, 30, 99, 100, 150, 457, 1000, 10_000] {
            let w = warmup_windows(warmup);
            if warmup == 0 {
                assert!(w.is_empty());
                continue;
            }
            assert_eq!(w[0].start, 0);
            assert_eq!(w.last().unwrap().end, warmup);
            for pair in w.windows(2) {
                assert_eq!(pair[0].end, pair[1].start);
                assert!(!pair[0].is_empty());
            }
        }
    }

    fn fresh_tunings(chains: usize, dim: usize) -> Vec<TuningState> {
        (0..chains).map(|_| TuningState::new(dim, 0.1, 8)).collect()
    }

    #[test]
    fn cross_chain_pooled_variance_is_concatenation() {
        let mut tunings = fresh_tunings(2, 1);
        let windows = vec![
            vec![vec![0.0], vec![2.0]],
            vec![vec![0.0], vec![-2.0]],
        ];
        let stats = vec![
            WindowStats { sum_accept_prob: 1.6, sum_jump_sq: 0.0, iterations: 2 },
            WindowStats { sum_accept_prob: 1.6, sum_jump_sq: 0.0, iterations: 2 },
        ];
        adapt_update(
            &mut tunings,
            &windows,
            &stats,
            AdaptationMode::CrossChain,
            SamplerKind::Rwm,
            None,
        )
        .unwrap();
        // Pooled sample variance of {0, 2, 0, -2} with denominator n-1.
        assert!((tunings[0].diag_preconditioner[0] - 8.0 / 3.0).abs() < 1e-14);
        assert_eq!(tunings[0], tunings[1], "chains share one tuning state");
    }

    #[test]
    fn pooling_m_chains_equals_one_long_chain() {
        let draws: Vec<Vec<f64>> = (0..12).map(|i| vec![(i as f64).sin() * 3.0]).collect();

        let mut pooled = fresh_tunings(3, 1);
        let per_chain_windows: Vec<Vec<Vec<f64>>> =
            draws.chunks(4).map(|c| c.to_vec()).collect();
        let stats = vec![WindowStats { sum_accept_prob: 3.2, sum_jump_sq: 0.0, iterations: 4 }; 3];
        adapt_update(
            &mut pooled,
            &per_chain_windows,
            &stats,
            AdaptationMode::CrossChain,
            SamplerKind::Rwm,
            None,
        )
        .unwrap();

        let mut single = fresh_tunings(1, 1);
        let stats1 = vec![WindowStats { sum_accept_prob: 9.6, sum_jump_sq: 0.0, iterations: 12 }];
        adapt_update(
            &mut single,
            &[draws],
            &stats1,
            AdaptationMode::CrossChain,
            SamplerKind::Rwm,
            None,
        )
        .unwrap();

        assert!(
            (pooled[0].diag_preconditioner[0] - single[0].diag_preconditioner[0]).abs() < 1e-14
        );
    }

    #[test]
    fn per_chain_mode_keeps_chains_independent() {
        let mut tunings = fresh_tunings(2, 1);
        let windows = vec![
            vec![vec![0.0], vec![2.0], vec![4.0]],
            vec![vec![0.0], vec![0.1], vec![0.2]],
        ];
        let stats = vec![
            WindowStats { sum_accept_prob: 2.7, sum_jump_sq: 0.0, iterations: 3 },
            WindowStats { sum_accept_prob: 0.3, sum_jump_sq: 0.0, iterations: 3 },
        ];
        adapt_update(
            &mut tunings,
            &windows,
            &stats,
            AdaptationMode::PerChain,
            SamplerKind::Rwm,
            None,
        )
        .unwrap();
        assert!((tunings[0].diag_preconditioner[0] - 4.0).abs() < 1e-14);
        assert!((tunings[1].diag_preconditioner[0] - 0.01).abs() < 1e-12);
        assert!(tunings[0].step_size > tunings[1].step_size);
    }

    #[test]
    fn frozen_tuning_rejects_adaptation() {
        let mut tunings = fresh_tunings(1, 1);
        freeze(&mut tunings);
        let err = adapt_update(
            &mut tunings,
            &[vec![vec![0.0], vec![1.0]]],
            &[WindowStats::default()],
            AdaptationMode::PerChain,
            SamplerKind::Rwm,
            None,
        );
        assert!(matches!(err, Err(Error::ContractViolation(_))));
    }

    #[test]
    fn zero_variance_window_clamps_and_flags() {
        let mut tunings = fresh_tunings(1, 1);
        let outcome = adapt_update(
            &mut tunings,
            &[vec![vec![5.0], vec![5.0], vec![5.0]]],
            &[WindowStats { sum_accept_prob: 2.0, sum_jump_sq: 0.0, iterations: 3 }],
            AdaptationMode::PerChain,
            SamplerKind::Rwm,
            None,
        )
        .unwrap();
        assert!(outcome.clamped);
        assert_eq!(tunings[0].diag_preconditioner[0], 1e-10);
    }

    #[test]
    fn leapfrog_search_climbs_then_settles() {
        let mut search = LeapfrogSearch::new();
        // True optimum at L = 4 for this synthetic score curve.
        let score = |l: u32| -> f64 {
            let x = l as f64;
            x / ((x / 4.0 - 1.0).powi(2) + 1.0) / (x + 1.0)
        };
        let mut l = 1;
        for _ in 0..8 {
            l = search.record_and_select(l, score(l));
        }
        assert_eq!(l, 4, "search should settle on the best rung");
    }
}
