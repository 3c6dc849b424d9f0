//! Monte Carlo estimators and their reliability measures.
//!
//! Implements the multi-chain convergence toolkit: per-chain and pooled
//! means, between/within variance components, R-hat, split R-hat,
//! nested R-hat over initialization groups, autocorrelation-based ESS,
//! MCSE, and quantiles.
//!
//! Conventions fixed here (normative for this crate):
//! - B = sample variance of per-chain means (denominator M-1).
//! - W = mean over chains of the per-chain sample variance (denominator N-1).
//! - R-hat = sqrt((N-1)/N + B/W); undefined (NaN) when W = 0.
//! - Multi-chain autocorrelations: rho_t = 1 - (W - mean_m c_t^(m)) / var_plus
//!   with var_plus = W (N-1)/N + B and c_t the biased-normalization (1/N)
//!   within-chain autocovariance. The lag sum is truncated at the first
//!   nonpositive sum of adjacent autocorrelation pairs (no monotonization);
//!   ESS = MN / (1 + 2 sum rho_t), clamped to [1, MN log10(MN)].
//! - Split R-hat halves every chain, dropping the middle draw when N is odd.
//! - Quantiles use linear interpolation at rank (n-1)q.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{mean, sample_variance};

/// Which phase an iteration belongs to. Only sampling draws enter estimators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Sampling,
}

/// Per-chain bookkeeping carried alongside the draws.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChainMeta {
    pub seed: u64,
    pub divergences: u64,
    pub acceptance_rate: f64,
    pub gradient_evals: u64,
}

/// Draws indexed by (chain, iteration, dimension) with phase labels and
/// initialization groups.
#[derive(Clone, Debug)]
pub struct ChainMatrix {
    chains: usize,
    iterations: usize,
    dim: usize,
    draws: Vec<f64>,
    phases: Vec<Phase>,
    group_of_chain: Vec<usize>,
    meta: Vec<ChainMeta>,
}

impl ChainMatrix {
    pub fn new(
        draws: Vec<f64>,
        chains: usize,
        iterations: usize,
        dim: usize,
        phases: Vec<Phase>,
        group_of_chain: Vec<usize>,
        meta: Vec<ChainMeta>,
    ) -> Result<Self> {
        if chains == 0 || dim == 0 {
            return Err(Error::invalid("chain matrix needs chains >= 1 and d >= 1"));
        }
        if draws.len() != chains * iterations * dim {
            return Err(Error::invalid("draw buffer does not match declared shape"));
        }
        if phases.len() != iterations {
            return Err(Error::invalid("one phase label per iteration required"));
        }
        if group_of_chain.len() != chains || meta.len() != chains {
            return Err(Error::invalid("per-chain metadata length mismatch"));
        }
        let k = group_of_chain.iter().max().map_or(0, |g| g + 1);
        for g in 0..k {
            if !group_of_chain.contains(&g) {
                return Err(Error::invalid(format!("group ids not contiguous: {g} missing")));
            }
        }
        Ok(ChainMatrix {
            chains,
            iterations,
            dim,
            draws,
            phases,
            group_of_chain,
            meta,
        })
    }

    pub fn chains(&self) -> usize {
        self.chains
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_groups(&self) -> usize {
        self.group_of_chain.iter().max().map_or(0, |g| g + 1)
    }

    pub fn group_of_chain(&self) -> &[usize] {
        &self.group_of_chain
    }

    pub fn meta(&self) -> &[ChainMeta] {
        &self.meta
    }

    pub fn phase(&self, iteration: usize) -> Phase {
        self.phases[iteration]
    }

    pub fn point(&self, chain: usize, iteration: usize) -> &[f64] {
        let base = (chain * self.iterations + iteration) * self.dim;
        &self.draws[base..base + self.dim]
    }

    pub fn phase_iterations(&self, phase: Phase) -> usize {
        self.phases.iter().filter(|p| **p == phase).count()
    }

    /// Applies a quantity's extractor to every draw of the given phase,
    /// returning one row per chain.
    pub fn extract(&self, quantity: &QuantityOfInterest, phase: Phase) -> Vec<Vec<f64>> {
        let keep: Vec<usize> = (0..self.iterations)
            .filter(|n| self.phases[*n] == phase)
            .collect();
        (0..self.chains)
            .map(|m| {
                keep.iter()
                    .map(|&n| (quantity.extractor)(self.point(m, n)))
                    .collect()
            })
            .collect()
    }
}

type Extractor = Box<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// A scalar summary f(theta) whose estimator quality is reported.
pub struct QuantityOfInterest {
    pub name: String,
    extractor: Extractor,
}

impl QuantityOfInterest {
    pub fn new(name: impl Into<String>, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        QuantityOfInterest {
            name: name.into(),
            extractor: Box::new(f),
        }
    }

    /// The i-th coordinate, f(theta) = theta_i.
    pub fn coordinate(i: usize) -> Self {
        Self::new(format!("theta_{i}"), move |theta: &[f64]| theta[i])
    }

    /// One coordinate quantity per dimension.
    pub fn all_coordinates(dim: usize) -> Vec<Self> {
        (0..dim).map(Self::coordinate).collect()
    }

    pub fn apply(&self, theta: &[f64]) -> f64 {
        (self.extractor)(theta)
    }
}

/// Report flags. `LowEss` fires when the measured ESS drops below
/// [`MIN_RELIABLE_ESS`]; `HighRhat` when R-hat exceeds the configured
/// threshold (default 1.01).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Flag {
    ConstantChain,
    LowEss,
    HighRhat,
    TooFewDraws,
    NonFinite,
}

impl std::fmt::Display for Flag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Flag::ConstantChain => "constant-chain",
            Flag::LowEss => "low-ess",
            Flag::HighRhat => "high-rhat",
            Flag::TooFewDraws => "too-few-draws",
            Flag::NonFinite => "non-finite",
        };
        f.write_str(s)
    }
}

/// Below this measured ESS the diagnostics themselves are unreliable.
pub const MIN_RELIABLE_ESS: f64 = 100.0;

/// Default flag threshold: R-hat above 1 + this value signals disagreement.
pub const DEFAULT_RHAT_THRESHOLD: f64 = 0.01;

/// Everything reported for one quantity of interest. Undefined statistics
/// are NaN; `nested_rhat` is absent entirely when there are no groups to
/// compare.
#[derive(Clone, Debug, Serialize)]
pub struct QuantitySummary {
    pub name: String,
    pub mean: f64,
    pub per_chain_means: Vec<f64>,
    pub sd: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
    pub bhat: f64,
    pub what: f64,
    pub rhat: f64,
    pub split_rhat: f64,
    pub nested_rhat: Option<f64>,
    pub ess: f64,
    pub mcse: f64,
    pub flags: Vec<Flag>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DiagnosticsReport {
    pub quantities: Vec<QuantitySummary>,
}

impl DiagnosticsReport {
    pub fn quantity(&self, name: &str) -> Option<&QuantitySummary> {
        self.quantities.iter().find(|q| q.name == name)
    }

    /// Smallest finite measured ESS over quantities; NaN counts as 0.
    pub fn min_ess(&self) -> f64 {
        self.quantities
            .iter()
            .map(|q| if q.ess.is_finite() { q.ess } else { 0.0 })
            .fold(f64::INFINITY, f64::min)
    }

    /// Largest R-hat over quantities; NaN counts as +inf (cannot pass).
    pub fn max_rhat(&self) -> f64 {
        self.quantities
            .iter()
            .map(|q| if q.rhat.is_nan() { f64::INFINITY } else { q.rhat })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn has_flags(&self) -> bool {
        self.quantities.iter().any(|q| !q.flags.is_empty())
    }

    /// One row per quantity, floats at 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "quantity,mean,sd,q05,q50,q95,bhat,what,rhat,split_rhat,nested_rhat,ess,mcse,flags\n",
        );
        for q in &self.quantities {
            let nested = q.nested_rhat.map_or(String::new(), float17);
            let flags = q
                .flags
                .iter()
                .map(|f| f.to_string())
                .collect::<Vec<_>>()
                .join(";");
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                q.name,
                float17(q.mean),
                float17(q.sd),
                float17(q.q05),
                float17(q.q50),
                float17(q.q95),
                float17(q.bhat),
                float17(q.what),
                float17(q.rhat),
                float17(q.split_rhat),
                nested,
                float17(q.ess),
                float17(q.mcse),
                flags,
            ));
        }
        out
    }
}

/// Formats a float with 17 significant digits so it round-trips exactly.
pub fn float17(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".to_string() } else { "-inf".to_string() }
    } else {
        format!("{x:.16e}")
    }
}

fn check_rectangular(samples: &[Vec<f64>]) -> Result<(usize, usize)> {
    if samples.is_empty() {
        return Err(Error::invalid("no chains given"));
    }
    let n = samples[0].len();
    if n == 0 {
        return Err(Error::invalid("chains are empty"));
    }
    if samples.iter().any(|c| c.len() != n) {
        return Err(Error::invalid("all chains must have equal length"));
    }
    Ok((samples.len(), n))
}

/// Per-chain means and their average, the pooled Monte Carlo estimator.
pub fn chain_means(samples: &[Vec<f64>]) -> Result<(Vec<f64>, f64)> {
    check_rectangular(samples)?;
    let per_chain: Vec<f64> = samples.iter().map(|c| mean(c)).collect();
    let pooled = mean(&per_chain);
    Ok((per_chain, pooled))
}

/// Between-chain variance B, within-chain variance W, and R-hat.
#[derive(Clone, Copy, Debug)]
pub struct RhatComponents {
    pub bhat: f64,
    pub what: f64,
    pub rhat: f64,
}

pub fn rhat_components(samples: &[Vec<f64>]) -> Result<RhatComponents> {
    let (m, n) = check_rectangular(samples)?;
    if m < 2 {
        return Err(Error::invalid("R-hat needs at least 2 chains"));
    }
    if n < 2 {
        return Err(Error::invalid("R-hat needs at least 2 draws per chain"));
    }
    let (per_chain, _) = chain_means(samples)?;
    let bhat = sample_variance(&per_chain);
    let what = mean(&samples.iter().map(|c| sample_variance(c)).collect::<Vec<_>>());
    let rhat = if what == 0.0 {
        f64::NAN
    } else {
        ((n as f64 - 1.0) / n as f64 + bhat / what).sqrt()
    };
    Ok(RhatComponents { bhat, what, rhat })
}

/// Splits every chain into first/second halves. Odd lengths drop the middle
/// draw so the halves stay equal.
pub fn split_chains(samples: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * samples.len());
    for chain in samples {
        let n = chain.len();
        let half = n / 2;
        out.push(chain[..half].to_vec());
        out.push(chain[n - half..].to_vec());
    }
    out
}

/// R-hat on half-chains: sensitive to within-chain drift that plain R-hat
/// cannot see.
pub fn split_rhat(samples: &[Vec<f64>]) -> Result<f64> {
    let (_, n) = check_rectangular(samples)?;
    if n < 4 {
        return Err(Error::invalid("split R-hat needs at least 4 draws per chain"));
    }
    Ok(rhat_components(&split_chains(samples))?.rhat)
}

/// R-hat over superchains: groups of chains that shared an initialization.
/// Isolates initialization-driven (nonstationary) disagreement.
pub fn nested_rhat(samples: &[Vec<f64>], group_of_chain: &[usize]) -> Result<f64> {
    let (m, n) = check_rectangular(samples)?;
    if group_of_chain.len() != m {
        return Err(Error::invalid("one group id per chain required"));
    }
    let k = group_of_chain.iter().max().map_or(0, |g| g + 1);
    if k < 2 {
        return Err(Error::invalid("nested R-hat needs at least 2 groups"));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (chain, &g) in group_of_chain.iter().enumerate() {
        members[g].push(chain);
    }
    if members.iter().any(|g| g.len() < 2) {
        return Err(Error::invalid("every group needs at least 2 chains"));
    }

    let chain_mean: Vec<f64> = samples.iter().map(|c| mean(c)).collect();
    // With a single draw per chain there is no within-chain spread to measure.
    let chain_var: Vec<f64> = samples
        .iter()
        .map(|c| if n >= 2 { sample_variance(c) } else { 0.0 })
        .collect();

    let mut group_means = Vec::with_capacity(k);
    let mut group_terms = Vec::with_capacity(k);
    for group in &members {
        let means: Vec<f64> = group.iter().map(|&m| chain_mean[m]).collect();
        let vars: Vec<f64> = group.iter().map(|&m| chain_var[m]).collect();
        group_means.push(mean(&means));
        group_terms.push(sample_variance(&means) + mean(&vars));
    }
    let nb = sample_variance(&group_means);
    let nw = mean(&group_terms);
    if nw == 0.0 {
        return Ok(f64::NAN);
    }
    Ok((1.0 + nb / nw).sqrt())
}

/// Autocovariances c_0..c_max_lag with biased normalization 1/N.
pub fn autocovariance(chain: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    let n = chain.len();
    if n < 2 {
        return Err(Error::invalid("autocovariance needs at least 2 draws"));
    }
    if max_lag >= n {
        return Err(Error::invalid("max_lag must be below the chain length"));
    }
    let m = mean(chain);
    let centered: Vec<f64> = chain.iter().map(|x| x - m).collect();
    let mut out = Vec::with_capacity(max_lag + 1);
    for t in 0..=max_lag {
        let s: f64 = (0..n - t).map(|i| centered[i] * centered[i + t]).sum();
        out.push(s / n as f64);
    }
    Ok(out)
}

fn is_constant(samples: &[Vec<f64>]) -> bool {
    let first = samples[0][0];
    samples.iter().all(|c| c.iter().all(|x| *x == first))
}

/// Multi-chain effective sample size.
///
/// With a single draw per chain the chains-as-samples path applies and the
/// ESS is the chain count. Constant input yields NaN.
pub fn ess(samples: &[Vec<f64>]) -> Result<f64> {
    let (m, n) = check_rectangular(samples)?;
    if n == 1 {
        return Ok(m as f64);
    }
    if n < 4 {
        return Err(Error::invalid("ESS needs N >= 4 draws per chain (or N = 1)"));
    }
    if samples.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::invalid("ESS needs finite draws"));
    }
    if is_constant(samples) {
        return Ok(f64::NAN);
    }

    let nf = n as f64;
    let centered: Vec<Vec<f64>> = samples
        .iter()
        .map(|c| {
            let mu = mean(c);
            c.iter().map(|x| x - mu).collect()
        })
        .collect();
    let acov_at = |t: usize| -> f64 {
        let per_chain = centered
            .iter()
            .map(|z| (0..n - t).map(|i| z[i] * z[i + t]).sum::<f64>() / nf);
        per_chain.sum::<f64>() / m as f64
    };

    let mean_c0 = acov_at(0);
    let what = mean_c0 * nf / (nf - 1.0);
    let bhat = if m >= 2 {
        let means: Vec<f64> = samples.iter().map(|c| mean(c)).collect();
        sample_variance(&means)
    } else {
        0.0
    };
    let var_plus = what * (nf - 1.0) / nf + bhat;
    if var_plus <= 0.0 {
        return Ok(f64::NAN);
    }
    let rho = |t: usize| 1.0 - (what - acov_at(t) * nf / (nf - 1.0)) / var_plus;

    // Geyer initial positive sequence: keep pairs (rho_2k, rho_2k+1) until the
    // first nonpositive pair sum. No monotonization.
    let max_lag = n - 4 + usize::from(n == 4);
    let mut lag_sum = 0.0;
    let rho1 = rho(1);
    if 1.0 + rho1 > 0.0 {
        lag_sum += rho1;
        let mut k = 1;
        while 2 * k + 1 <= max_lag {
            let re = rho(2 * k);
            let ro = rho(2 * k + 1);
            if re + ro <= 0.0 {
                break;
            }
            lag_sum += re + ro;
            k += 1;
        }
    }
    let tau = 1.0 + 2.0 * lag_sum;
    let total = m as f64 * nf;
    let cap = total * total.log10();
    let raw = if tau <= 0.0 || !tau.is_finite() {
        cap
    } else {
        total / tau
    };
    Ok(raw.min(cap).max(1.0))
}

/// Monte Carlo standard error: sd / sqrt(ESS).
pub fn mcse(sd: f64, ess: f64) -> Result<f64> {
    if !(sd >= 0.0) {
        return Err(Error::invalid("sd must be nonnegative"));
    }
    if !(ess > 0.0) {
        return Err(Error::invalid("ESS must be positive"));
    }
    Ok(sd / ess.sqrt())
}

/// Linear-interpolation quantile at rank (n-1)q of pre-sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::invalid("quantile of empty input"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::invalid(format!("quantile level {q} outside [0, 1]")));
    }
    let n = sorted.len();
    if n == 1 {
        return Ok(sorted[0]);
    }
    let h = (n - 1) as f64 * q;
    let j = h.floor() as usize;
    let g = h - j as f64;
    if j + 1 >= n {
        return Ok(sorted[n - 1]);
    }
    Ok((1.0 - g) * sorted[j] + g * sorted[j + 1])
}

fn summarize_quantity(
    name: &str,
    vals: &[Vec<f64>],
    group_of_chain: &[usize],
    num_groups: usize,
    rhat_threshold: f64,
) -> QuantitySummary {
    let m = vals.len();
    let n = vals[0].len();
    let mut flags = Vec::new();

    if vals.iter().flatten().any(|x| !x.is_finite()) {
        flags.push(Flag::NonFinite);
        return QuantitySummary {
            name: name.to_string(),
            mean: f64::NAN,
            per_chain_means: vec![f64::NAN; m],
            sd: f64::NAN,
            q05: f64::NAN,
            q50: f64::NAN,
            q95: f64::NAN,
            bhat: f64::NAN,
            what: f64::NAN,
            rhat: f64::NAN,
            split_rhat: f64::NAN,
            nested_rhat: None,
            ess: f64::NAN,
            mcse: f64::NAN,
            flags,
        };
    }

    let (per_chain_means, pooled) = chain_means(vals).expect("nonempty by construction");
    let mut pooled_draws: Vec<f64> = vals.iter().flatten().copied().collect();
    let sd = if pooled_draws.len() >= 2 {
        sample_variance(&pooled_draws).sqrt()
    } else {
        f64::NAN
    };
    pooled_draws.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let q05 = quantile(&pooled_draws, 0.05).unwrap();
    let q50 = quantile(&pooled_draws, 0.50).unwrap();
    let q95 = quantile(&pooled_draws, 0.95).unwrap();

    let constant = is_constant(vals);
    if constant {
        flags.push(Flag::ConstantChain);
    }

    let (bhat, what, rhat) = if m >= 2 && n >= 2 {
        let c = rhat_components(vals).expect("preconditions checked");
        (c.bhat, c.what, c.rhat)
    } else {
        (f64::NAN, f64::NAN, f64::NAN)
    };

    let split = if n >= 4 {
        split_rhat(vals).expect("preconditions checked")
    } else {
        f64::NAN
    };

    let nested = if num_groups >= 2 {
        nested_rhat(vals, group_of_chain).ok()
    } else {
        None
    };

    let ess_value = if n == 1 || n >= 4 {
        ess(vals).expect("preconditions checked")
    } else {
        f64::NAN
    };
    // Split R-hat (and for 1 < N < 4 the ESS too) needs more draws.
    if n < 4 {
        flags.push(Flag::TooFewDraws);
    }
    let mcse_value = if ess_value.is_finite() && ess_value > 0.0 && sd.is_finite() {
        mcse(sd, ess_value).unwrap()
    } else {
        f64::NAN
    };

    if ess_value.is_finite() && ess_value < MIN_RELIABLE_ESS {
        flags.push(Flag::LowEss);
    }
    let worst_rhat = rhat.max(if split.is_nan() { f64::NEG_INFINITY } else { split });
    if worst_rhat.is_finite() && worst_rhat > 1.0 + rhat_threshold {
        flags.push(Flag::HighRhat);
    }

    QuantitySummary {
        name: name.to_string(),
        mean: pooled,
        per_chain_means,
        sd,
        q05,
        q50,
        q95,
        bhat,
        what,
        rhat,
        split_rhat: split,
        nested_rhat: nested,
        ess: ess_value,
        mcse: mcse_value,
        flags,
    }
}

/// Computes the full report over sampling-phase draws, one summary per
/// quantity. A degenerate quantity only flags itself; it never aborts the
/// report.
pub fn summarize(
    matrix: &ChainMatrix,
    quantities: &[QuantityOfInterest],
    rhat_threshold: f64,
) -> Result<DiagnosticsReport> {
    if matrix.phase_iterations(Phase::Sampling) == 0 {
        return Err(Error::invalid("sampling phase is empty"));
    }
    let num_groups = matrix.num_groups();
    let quantities = quantities
        .iter()
        .map(|q| {
            let vals = matrix.extract(q, Phase::Sampling);
            summarize_quantity(
                &q.name,
                &vals,
                matrix.group_of_chain(),
                num_groups,
                rhat_threshold,
            )
        })
        .collect();
    Ok(DiagnosticsReport { quantities })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn normals(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = StreamRng::from_key(&[seed, 0xD1A6]);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn chain_means_fixtures() {
        let (per, pooled) =
            chain_means(&[vec![1.0, 2.0, 3.0, 4.0], vec![4.0, 3.0, 2.0, 1.0]]).unwrap();
        assert_eq!(per, vec![2.5, 2.5]);
        assert_eq!(pooled, 2.5);

        let (per, pooled) = chain_means(&[vec![7.0; 5]]).unwrap();
        assert_eq!(per, vec![7.0]);
        assert_eq!(pooled, 7.0);

        assert!(chain_means(&[]).is_err());
    }

    #[test]
    fn pooled_mean_equals_grand_mean_for_equal_lengths() {
        let chains = vec![normals(1, 50), normals(2, 50), normals(3, 50)];
        let (_, pooled) = chain_means(&chains).unwrap();
        let grand = mean(&chains.iter().flatten().copied().collect::<Vec<_>>());
        assert!((pooled - grand).abs() < 1e-12);
    }

    #[test]
    fn rhat_fixture_opposite_trends() {
        let c = rhat_components(&[vec![1.0, 2.0, 3.0, 4.0], vec![4.0, 3.0, 2.0, 1.0]]).unwrap();
        assert!((c.bhat - 0.0).abs() < 1e-12);
        assert!((c.what - 5.0 / 3.0).abs() < 1e-12);
        assert!((c.rhat - 0.75f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rhat_fixture_shifted_chains() {
        let c = rhat_components(&[vec![0.0, 2.0], vec![1.0, 3.0]]).unwrap();
        assert!((c.bhat - 0.5).abs() < 1e-12);
        assert!((c.what - 2.0).abs() < 1e-12);
        assert!((c.rhat - 0.75f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rhat_identical_chains_hits_floor() {
        let chain = normals(9, 20);
        let c = rhat_components(&[chain.clone(), chain]).unwrap();
        assert!(c.bhat.abs() < 1e-20);
        let n = 20.0f64;
        assert!((c.rhat - ((n - 1.0) / n).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rhat_constant_chains_is_undefined_not_a_crash() {
        let c = rhat_components(&[vec![2.0; 10], vec![2.0; 10]]).unwrap();
        assert_eq!(c.what, 0.0);
        assert!(c.rhat.is_nan());
    }

    #[test]
    fn split_rhat_detects_trend() {
        let r = split_rhat(&[vec![1.0, 2.0, 3.0, 4.0]]).unwrap();
        assert!((r - 4.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn split_rhat_alternating_fixture() {
        let r = split_rhat(&[vec![1.0, 3.0, 1.0, 3.0]]).unwrap();
        assert!((r - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn split_drops_middle_draw() {
        let split = split_chains(&[vec![1.0, 2.0, 3.0, 4.0, 4.5]]);
        assert_eq!(split, vec![vec![1.0, 2.0], vec![4.0, 4.5]]);
    }

    #[test]
    fn split_rhat_white_noise_rarely_alarms() {
        let mut alarms = 0;
        for seed in 0..200 {
            let chains: Vec<Vec<f64>> =
                (0..4).map(|c| normals(1000 + 10 * seed + c, 1000)).collect();
            if split_rhat(&chains).unwrap() > 1.01 {
                alarms += 1;
            }
        }
        assert!(alarms <= 10, "{alarms}/200 white-noise alarms");
    }

    #[test]
    fn split_rhat_trend_beats_permutation() {
        let mut wins = 0;
        let trials = 200;
        for seed in 0..trials {
            let n = 64;
            let trend: Vec<f64> = (1..=n).map(|i| i as f64).collect();
            let mut permuted = trend.clone();
            let mut rng = StreamRng::from_key(&[42, seed]);
            for i in (1..n).rev() {
                let j = rng.random_range(0..=i);
                permuted.swap(i, j);
            }
            let r_trend = split_rhat(&[trend]).unwrap();
            let r_perm = split_rhat(&[permuted]).unwrap();
            if r_trend > r_perm {
                wins += 1;
            }
        }
        assert!(wins * 100 >= trials * 95, "{wins}/{trials}");
    }

    #[test]
    fn nested_rhat_fixture() {
        // group 0: chains with means {1, 3}, group 1: means {2, 4};
        // every chain has within-chain sample variance 2.
        let samples = vec![
            vec![0.0, 2.0],
            vec![2.0, 4.0],
            vec![1.0, 3.0],
            vec![3.0, 5.0],
        ];
        let groups = vec![0, 0, 1, 1];
        let r = nested_rhat(&samples, &groups).unwrap();
        assert!((r - 1.125f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn nested_rhat_equal_means_is_one() {
        let samples = vec![
            vec![1.0, 3.0],
            vec![3.0, 1.0],
            vec![0.0, 4.0],
            vec![4.0, 0.0],
        ];
        let r = nested_rhat(&samples, &[0, 0, 1, 1]).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nested_rhat_long_stationary_chains_near_one() {
        let chains: Vec<Vec<f64>> = (0..8).map(|c| normals(77 + c, 20_000)).collect();
        let groups = vec![0, 0, 1, 1, 2, 2, 3, 3];
        let r = nested_rhat(&chains, &groups).unwrap();
        assert!((r - 1.0).abs() < 0.01, "nested rhat {r}");
    }

    #[test]
    fn nested_rhat_preconditions() {
        assert!(nested_rhat(&[vec![1.0], vec![2.0]], &[0, 0]).is_err());
        assert!(nested_rhat(&[vec![1.0], vec![2.0], vec![3.0]], &[0, 0, 1]).is_err());
    }

    #[test]
    fn autocovariance_lag0_is_biased_variance() {
        let chain = normals(5, 500);
        let c = autocovariance(&chain, 3).unwrap();
        let mu = mean(&chain);
        let biased: f64 =
            chain.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / chain.len() as f64;
        assert!((c[0] - biased).abs() < 1e-12);
    }

    #[test]
    fn autocovariance_alternating_fixture() {
        let n = 100;
        let chain: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let c = autocovariance(&chain, 1).unwrap();
        assert!((c[1] - (-(n as f64 - 1.0) / n as f64)).abs() < 1e-12);
    }

    #[test]
    fn autocovariance_white_noise_decorrelates() {
        let chain = normals(6, 100_000);
        let c = autocovariance(&chain, 20).unwrap();
        for t in 1..=20 {
            assert!((c[t] / c[0]).abs() < 0.02, "lag {t}: {}", c[t] / c[0]);
        }
    }

    #[test]
    fn ess_iid_draws_near_total() {
        // The truncated-lag estimator has an intrinsic spread of a few
        // percent at MN = 1000; individual seeds land near MN.
        for seed in [0, 1, 2] {
            let chains: Vec<Vec<f64>> = (0..4).map(|c| normals(400 + 4 * seed + c, 250)).collect();
            let e = ess(&chains).unwrap();
            assert!((800.0..=1200.0).contains(&e), "ESS {e}");
        }
    }

    #[test]
    fn ess_iid_bounds_across_seeds() {
        let mut values = Vec::new();
        for seed in 0..200 {
            let chains: Vec<Vec<f64>> =
                (0..4).map(|c| normals(5000 + 10 * seed + c, 250)).collect();
            values.push(ess(&chains).unwrap() / 1000.0);
        }
        let inside = values.iter().filter(|e| (0.8..=1.25).contains(*e)).count();
        assert!(inside >= 185, "only {inside}/200 seeds inside [0.8, 1.25] MN");
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = values[100];
        assert!((0.9..=1.1).contains(&median), "median {median}");
    }

    fn ar1(seed: u64, rho: f64, n: usize) -> Vec<f64> {
        let mut rng = StreamRng::from_key(&[seed, 0xA41]);
        let sd_stat = 1.0 / (1.0 - rho * rho).sqrt();
        let mut x = sd_stat * rng.sample::<f64, _>(StandardNormal);
        (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                x = rho * x + z;
                x
            })
            .collect()
    }

    #[test]
    fn ess_matches_ar1_analytic_rates() {
        let n = 100_000;
        for (seed, rho) in [(1u64, 0.9f64), (2, 0.5), (3, 0.0), (4, -0.5)] {
            let chain = ar1(seed, rho, n);
            let e = ess(&[chain]).unwrap();
            let expected = n as f64 * (1.0 - rho) / (1.0 + rho);
            let ratio = e / expected;
            assert!(
                (0.85..=1.15).contains(&ratio),
                "rho {rho}: ESS {e}, expected {expected}"
            );
            if rho == -0.5 {
                assert!(e > n as f64, "antithetic chain should be super-efficient");
            }
        }
    }

    #[test]
    fn ess_single_draw_per_chain_counts_chains() {
        let chains: Vec<Vec<f64>> = (0..1000).map(|c| vec![c as f64]).collect();
        assert_eq!(ess(&chains).unwrap(), 1000.0);
    }

    #[test]
    fn ess_constant_input_is_undefined() {
        assert!(ess(&[vec![1.0; 100]]).unwrap().is_nan());
    }

    #[test]
    fn ess_ratio_of_variances_interpretation() {
        // B N / W estimates the per-chain autocorrelation time scale; for iid
        // chains it hovers around 1. The spread below is the chi-square noise
        // of 8 chain means.
        let mut ratios = Vec::new();
        for seed in 0..200 {
            let chains: Vec<Vec<f64>> =
                (0..8).map(|c| normals(9000 + 10 * seed + c, 1000)).collect();
            let c = rhat_components(&chains).unwrap();
            ratios.push(c.bhat * 1000.0 / c.what);
        }
        let inside = ratios.iter().filter(|r| (0.2..=5.0).contains(*r)).count();
        assert!(inside >= 190, "only {inside}/200 inside [0.2, 5]");
        ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = ratios[100];
        assert!((0.5..=2.0).contains(&median), "median {median}");
    }

    #[test]
    fn mcse_fixtures() {
        assert_eq!(mcse(2.0, 100.0).unwrap(), 0.2);
        assert_eq!(mcse(1.0, 100.0).unwrap(), 0.1);
        assert_eq!(mcse(1.0, 10_000.0).unwrap(), 0.01);
        assert!(mcse(1.0, 0.0).is_err());
        assert!(mcse(-1.0, 10.0).is_err());
    }

    #[test]
    fn quantile_fixtures() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&xs, 0.5).unwrap(), 2.5);
        assert_eq!(quantile(&xs, 0.0).unwrap(), 1.0);
        assert_eq!(quantile(&xs, 1.0).unwrap(), 4.0);
        assert!(quantile(&xs, 1.5).is_err());
        assert!(quantile(&[], 0.5).is_err());
    }

    fn matrix_from_chains(chains: Vec<Vec<f64>>, groups: Vec<usize>) -> ChainMatrix {
        let m = chains.len();
        let n = chains[0].len();
        let mut draws = Vec::with_capacity(m * n);
        for c in &chains {
            draws.extend_from_slice(c);
        }
        let meta = (0..m)
            .map(|i| ChainMeta {
                seed: i as u64,
                divergences: 0,
                acceptance_rate: 1.0,
                gradient_evals: 0,
            })
            .collect();
        ChainMatrix::new(draws, m, n, 1, vec![Phase::Sampling; n], groups, meta).unwrap()
    }

    #[test]
    fn summarize_reports_mcse_identity_and_flags() {
        let chains: Vec<Vec<f64>> = (0..4).map(|c| normals(50 + c, 500)).collect();
        let matrix = matrix_from_chains(chains, vec![0, 1, 2, 3]);
        let qs = [QuantityOfInterest::coordinate(0)];
        let report = summarize(&matrix, &qs, DEFAULT_RHAT_THRESHOLD).unwrap();
        let q = &report.quantities[0];
        assert_eq!(q.mcse, mcse(q.sd, q.ess).unwrap());
        assert!(q.nested_rhat.is_none(), "K=M means no real groups to nest");
        assert!(q.flags.is_empty(), "{:?}", q.flags);
    }

    #[test]
    fn summarize_includes_nested_only_with_groups() {
        let chains: Vec<Vec<f64>> = (0..4).map(|c| normals(60 + c, 500)).collect();
        let matrix = matrix_from_chains(chains, vec![0, 0, 1, 1]);
        let qs = [QuantityOfInterest::coordinate(0)];
        let report = summarize(&matrix, &qs, DEFAULT_RHAT_THRESHOLD).unwrap();
        assert!(report.quantities[0].nested_rhat.is_some());
    }

    #[test]
    fn summarize_antithetic_first_vs_second_moment() {
        // Anticorrelated draws estimate the mean better than the second
        // moment; the ESS must reflect that per quantity.
        let chains: Vec<Vec<f64>> = (0..4)
            .map(|c| ar1(100 + c, -0.6, 4000))
            .collect();
        let m = chains.len();
        let n = chains[0].len();
        let mut draws = Vec::new();
        for c in &chains {
            draws.extend_from_slice(c);
        }
        let meta = (0..m)
            .map(|i| ChainMeta {
                seed: i as u64,
                divergences: 0,
                acceptance_rate: 1.0,
                gradient_evals: 0,
            })
            .collect();
        let matrix = ChainMatrix::new(
            draws,
            m,
            n,
            1,
            vec![Phase::Sampling; n],
            vec![0, 1, 2, 3],
            meta,
        )
        .unwrap();
        let qs = [
            QuantityOfInterest::coordinate(0),
            QuantityOfInterest::new("theta_0_sq", |t: &[f64]| t[0] * t[0]),
        ];
        let report = summarize(&matrix, &qs, DEFAULT_RHAT_THRESHOLD).unwrap();
        let first = report.quantity("theta_0").unwrap().ess;
        let second = report.quantity("theta_0_sq").unwrap().ess;
        assert!(
            first > second,
            "first-moment ESS {first} should exceed second-moment ESS {second}"
        );
    }

    #[test]
    fn summarize_never_aborts_on_degenerate_quantity() {
        let chains: Vec<Vec<f64>> = (0..2).map(|c| normals(70 + c, 100)).collect();
        let matrix = matrix_from_chains(chains, vec![0, 1]);
        let qs = [
            QuantityOfInterest::new("constant", |_| 3.0),
            QuantityOfInterest::coordinate(0),
        ];
        let report = summarize(&matrix, &qs, DEFAULT_RHAT_THRESHOLD).unwrap();
        let degenerate = report.quantity("constant").unwrap();
        assert!(degenerate.flags.contains(&Flag::ConstantChain));
        assert!(degenerate.rhat.is_nan());
        let fine = report.quantity("theta_0").unwrap();
        assert!(fine.rhat.is_finite());
    }

    #[test]
    fn report_csv_shape() {
        let chains: Vec<Vec<f64>> = (0..2).map(|c| normals(80 + c, 100)).collect();
        let matrix = matrix_from_chains(chains, vec![0, 1]);
        let qs = [QuantityOfInterest::coordinate(0)];
        let report = summarize(&matrix, &qs, DEFAULT_RHAT_THRESHOLD).unwrap();
        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "quantity,mean,sd,q05,q50,q95,bhat,what,rhat,split_rhat,nested_rhat,ess,mcse,flags"
        );
        let row = lines.next().unwrap();
        assert!(row.starts_with("theta_0,"));
        assert_eq!(row.split(',').count(), 14);
    }

    #[test]
    fn float17_round_trips() {
        for x in [0.1, -3.25e-17, 123456.789, f64::MIN_POSITIVE, 1.0 / 3.0] {
            let s = float17(x);
            assert_eq!(s.parse::<f64>().unwrap(), x, "{s}");
        }
        assert_eq!(float17(f64::NAN), "nan");
    }
}
