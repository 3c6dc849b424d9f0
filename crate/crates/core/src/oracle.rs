//! Analytic ground truth for validating the engine and diagnostics.
//!
//! The Ornstein-Uhlenbeck process evolving from normal(mu0, sigma0) toward
//! normal(mu, sigma) has Gaussian marginals in closed form, which makes it
//! an exactly checkable stand-in for a warming-up Markov chain: bias,
//! nonstationary variance, total variation distance to the target, and the
//! relaxation time are all computable. A symmetric two-state kernel rounds
//! this out with the classic tradeoff between convergence speed and
//! asymptotic variance.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{tag, StreamRng};
use crate::stats::{mean, sample_variance};

/// Parameters of the univariate OU bridge from p0 = normal(mu0, sigma0)
/// to the stationary law p = normal(mu, sigma).
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OuProcessSpec {
    pub mu0: f64,
    pub sigma0: f64,
    pub mu: f64,
    pub sigma: f64,
}

impl OuProcessSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::invalid("OU stationary sigma must be positive"));
        }
        if !(self.sigma0 >= 0.0) {
            return Err(Error::invalid("OU initial sigma must be nonnegative"));
        }
        Ok(())
    }
}

/// Marginal law of the process at time t:
/// mean = mu + (mu0 - mu) e^-t, sd = sqrt(sigma^2 + (sigma0^2 - sigma^2) e^-2t).
pub fn ou_marginal(spec: &OuProcessSpec, t: f64) -> Result<(f64, f64)> {
    spec.validate()?;
    if !(t >= 0.0) {
        return Err(Error::invalid("time must be nonnegative"));
    }
    let decay = (-t).exp();
    let mean = spec.mu + (spec.mu0 - spec.mu) * decay;
    let var = spec.sigma * spec.sigma
        + (spec.sigma0 * spec.sigma0 - spec.sigma * spec.sigma) * decay * decay;
    Ok((mean, var.max(0.0).sqrt()))
}

/// One exact transition of size `dt`: the conditional law given theta is
/// normal(mu + (theta - mu) e^-dt, sigma^2 (1 - e^-2dt)), so iterating from
/// theta0 ~ normal(mu0, sigma0) reproduces the marginals at every multiple
/// of dt with no discretization error.
pub fn ou_exact_step(spec: &OuProcessSpec, theta: f64, dt: f64, rng: &mut StreamRng) -> Result<f64> {
    spec.validate()?;
    if !(dt > 0.0) {
        return Err(Error::invalid("step size must be positive"));
    }
    let decay = (-dt).exp();
    let cond_sd = (spec.sigma * spec.sigma * (1.0 - decay * decay)).sqrt();
    let z: f64 = rng.sample(StandardNormal);
    Ok(spec.mu + (theta - spec.mu) * decay + cond_sd * z)
}

// ---------------------------------------------------------------------------
// Normal CDF
// ---------------------------------------------------------------------------

/// Error function, series for small arguments and a Lentz continued fraction
/// for the complementary function beyond |x| = 3.
pub fn erf(x: f64) -> f64 {
    if x < 0.0 {
        return -erf(-x);
    }
    if x >= 3.0 {
        return 1.0 - erfc_large(x);
    }
    // Maclaurin series: erf(x) = 2/sqrt(pi) sum (-1)^n x^(2n+1) / (n! (2n+1))
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    let mut n = 1.0;
    loop {
        term *= -x2 / n;
        let add = term / (2.0 * n + 1.0);
        sum += add;
        if add.abs() < 1e-18 * sum.abs().max(1e-300) {
            break;
        }
        n += 1.0;
        if n > 200.0 {
            break;
        }
    }
    std::f64::consts::FRAC_2_SQRT_PI * sum
}

fn erfc_large(x: f64) -> f64 {
    // erfc(x) = Q(1/2, x^2), evaluated with the Legendre continued fraction
    // for the incomplete gamma function (modified Lentz):
    // Q(a, y) = e^-y y^a / Gamma(a) * 1/(y+1-a - 1(1-a)/(y+3-a - 2(2-a)/...))
    let tiny = 1e-300;
    let y = x * x;
    let mut b = y + 0.5;
    let mut c = 1.0 / tiny;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..300 {
        let an = -(i as f64) * (i as f64 - 0.5);
        b += 2.0;
        d = an * d + b;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + an / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-y).exp() * x * h / std::f64::consts::PI.sqrt()
}

/// Complementary error function with full relative accuracy in the tail.
pub fn erfc(x: f64) -> f64 {
    if x >= 3.0 {
        erfc_large(x)
    } else {
        1.0 - erf(x)
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    let z = x / std::f64::consts::SQRT_2;
    if z < -0.5 {
        0.5 * erfc(-z)
    } else {
        0.5 * (1.0 + erf(z))
    }
}

fn normal_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
}

// ---------------------------------------------------------------------------
// Total variation distance
// ---------------------------------------------------------------------------

fn adaptive_simpson(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    adaptive_simpson(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
        + adaptive_simpson(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    if a >= b {
        return 0.0;
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    adaptive_simpson(&f, a, b, fa, fm, fb, whole, tol, 48)
}

/// Points where the two normal densities cross, in ascending order.
fn normal_crossings(m1: f64, s1: f64, m2: f64, s2: f64) -> Vec<f64> {
    // log p1 - log p2 is a quadratic a x^2 + b x + c.
    let a = 1.0 / (2.0 * s2 * s2) - 1.0 / (2.0 * s1 * s1);
    let b = m1 / (s1 * s1) - m2 / (s2 * s2);
    let c = m2 * m2 / (2.0 * s2 * s2) - m1 * m1 / (2.0 * s1 * s1) + (s2 / s1).ln();
    if a.abs() < 1e-300 {
        if b.abs() < 1e-300 {
            return Vec::new();
        }
        return vec![-c / b];
    }
    let disc = b * b - 4.0 * a * c;
    if disc <= 0.0 {
        return Vec::new();
    }
    let sq = disc.sqrt();
    let mut roots = vec![(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)];
    roots.sort_by(|x, y| x.partial_cmp(y).unwrap());
    roots
}

/// Total variation distance between normal(mean1, sd1) and normal(mean2, sd2),
/// by adaptive quadrature of |p - q|/2 split at the analytic density
/// crossings. Absolute accuracy 1e-8 or better.
///
/// Extra cuts at each mode and its 2/6-sigma points keep the adaptive rule
/// from skipping over a narrow bump when the laws barely overlap.
pub fn tv_normal(mean1: f64, sd1: f64, mean2: f64, sd2: f64) -> Result<f64> {
    if !(sd1 > 0.0) || !(sd2 > 0.0) {
        return Err(Error::invalid("normal sd must be positive"));
    }
    let lo = (mean1 - 12.0 * sd1).min(mean2 - 12.0 * sd2);
    let hi = (mean1 + 12.0 * sd1).max(mean2 + 12.0 * sd2);
    let mut cuts = vec![lo, hi];
    for x in normal_crossings(mean1, sd1, mean2, sd2) {
        cuts.push(x);
    }
    for (m, s) in [(mean1, sd1), (mean2, sd2)] {
        for k in [-6.0, -2.0, 0.0, 2.0, 6.0] {
            cuts.push(m + k * s);
        }
    }
    cuts.retain(|x| (lo..=hi).contains(x));
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-12 * (hi - lo));

    let f = |x: f64| (normal_pdf(x, mean1, sd1) - normal_pdf(x, mean2, sd2)).abs();
    let mut total = 0.0;
    for pair in cuts.windows(2) {
        total += integrate(f, pair[0], pair[1], 1e-10);
    }
    let tv = (0.5 * total).clamp(0.0, 1.0);

    if cfg!(debug_assertions) && (sd1 - sd2).abs() < 1e-14 * sd1 {
        let closed = 2.0 * normal_cdf((mean1 - mean2).abs() / (2.0 * sd1)) - 1.0;
        debug_assert!(
            (tv - closed).abs() <= 1e-8,
            "quadrature {tv} vs closed form {closed}"
        );
    }
    Ok(tv)
}

/// First time the OU marginal is within eps of the stationary law in total
/// variation. The distance is monotone non-increasing in t for this family,
/// so bisection applies; absolute tolerance 1e-8.
pub fn relaxation_time(spec: &OuProcessSpec, eps: f64) -> Result<f64> {
    spec.validate()?;
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::invalid("eps must lie in (0, 1)"));
    }
    let tv_at = |t: f64| -> Result<f64> {
        let (m, s) = ou_marginal(spec, t)?;
        if s == 0.0 {
            // Point-mass start: TV against a continuous law is 1.
            return Ok(1.0);
        }
        tv_normal(m, s, spec.mu, spec.sigma)
    };
    if tv_at(0.0)? <= eps {
        return Ok(0.0);
    }
    let mut hi = 1.0;
    let mut lo = 0.0;
    while tv_at(hi)? > eps {
        lo = hi;
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::invalid("relaxation time did not bracket"));
        }
    }
    while hi - lo > 1e-8 {
        let mid = 0.5 * (lo + hi);
        if tv_at(mid)? <= eps {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

// ---------------------------------------------------------------------------
// Replicate studies
// ---------------------------------------------------------------------------

/// Independent replicate estimates of one scalar, optionally grouped by
/// shared initialization.
#[derive(Clone, Debug)]
pub struct ReplicateStudy {
    estimates: Vec<f64>,
    groups: Option<Vec<usize>>,
}

impl ReplicateStudy {
    pub fn new(estimates: Vec<f64>) -> Result<Self> {
        if estimates.len() < 2 {
            return Err(Error::invalid("a replicate study needs at least 2 runs"));
        }
        Ok(ReplicateStudy { estimates, groups: None })
    }

    pub fn grouped(estimates: Vec<f64>, groups: Vec<usize>) -> Result<Self> {
        if estimates.len() != groups.len() {
            return Err(Error::invalid("one group id per replicate required"));
        }
        let study = ReplicateStudy { estimates, groups: Some(groups) };
        study.group_members()?;
        Ok(study)
    }

    pub fn estimates(&self) -> &[f64] {
        &self.estimates
    }

    fn group_members(&self) -> Result<Vec<Vec<usize>>> {
        let groups = self
            .groups
            .as_ref()
            .ok_or_else(|| Error::invalid("study has no grouping"))?;
        let k = groups.iter().max().map_or(0, |g| g + 1);
        let mut members = vec![Vec::new(); k];
        for (i, &g) in groups.iter().enumerate() {
            members[g].push(i);
        }
        if members.len() < 2 || members.iter().any(|m| m.len() < 2) {
            return Err(Error::invalid(
                "grouped studies need >= 2 groups of >= 2 replicates",
            ));
        }
        Ok(members)
    }
}

/// Squared-error decomposition of a replicate study against a known truth.
#[derive(Clone, Copy, Debug)]
pub struct ErrorDecomposition {
    pub mse: f64,
    pub squared_bias: f64,
    pub variance: f64,
}

pub fn error_decomposition(study: &ReplicateStudy, truth: f64) -> Result<ErrorDecomposition> {
    let est = study.estimates();
    if est.len() < 2 {
        return Err(Error::invalid("need at least 2 replicates"));
    }
    let mse = est.iter().map(|f| (f - truth) * (f - truth)).sum::<f64>() / est.len() as f64;
    let bias = mean(est) - truth;
    Ok(ErrorDecomposition {
        mse,
        squared_bias: bias * bias,
        variance: sample_variance(est),
    })
}

/// Law-of-total-variance split into initialization-driven (nonstationary)
/// and seed-driven (persistent) parts.
#[derive(Clone, Copy, Debug)]
pub struct VarianceDecomposition {
    pub nonstationary: f64,
    pub persistent: f64,
    pub total: f64,
}

pub fn variance_decomposition(study: &ReplicateStudy) -> Result<VarianceDecomposition> {
    let members = study.group_members()?;
    let est = study.estimates();
    let mut group_means = Vec::with_capacity(members.len());
    let mut group_vars = Vec::with_capacity(members.len());
    for m in &members {
        let vals: Vec<f64> = m.iter().map(|&i| est[i]).collect();
        group_means.push(mean(&vals));
        group_vars.push(sample_variance(&vals));
    }
    let nonstationary = sample_variance(&group_means);
    let persistent = mean(&group_vars);
    Ok(VarianceDecomposition {
        nonstationary,
        persistent,
        total: nonstationary + persistent,
    })
}

// ---------------------------------------------------------------------------
// Discrete two-state example
// ---------------------------------------------------------------------------

/// Analytics for the symmetric two-state chain that switches with
/// probability q: ESS per draw q/(1-q) against per-step TV contraction
/// |1-2q|. The kernel converging fastest (q = 1/2) is not the one with the
/// smallest asymptotic variance.
#[derive(Clone, Copy, Debug)]
pub struct TwoStateAnalytics {
    pub ess_per_draw: f64,
    pub tv_decay_factor: f64,
}

pub fn two_state_analytics(switch_probability: f64) -> Result<TwoStateAnalytics> {
    let q = switch_probability;
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::invalid("switch probability must lie in (0, 1]"));
    }
    let ess_per_draw = if q == 1.0 { f64::INFINITY } else { q / (1.0 - q) };
    Ok(TwoStateAnalytics {
        ess_per_draw,
        tv_decay_factor: (1.0 - 2.0 * q).abs(),
    })
}

/// Simulates the two-state chain (stationary start) as 0/1 indicators.
pub fn simulate_two_state(q: f64, steps: usize, seed: u64) -> Result<Vec<f64>> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::invalid("switch probability must lie in (0, 1]"));
    }
    let mut rng = StreamRng::from_key(&[seed, tag::ORACLE, 0x25]);
    let mut state = if rng.random::<f64>() < 0.5 { 0.0 } else { 1.0 };
    Ok((0..steps)
        .map(|_| {
            if rng.random::<f64>() < q {
                state = 1.0 - state;
            }
            state
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Empirical decay study
// ---------------------------------------------------------------------------

/// Measured decomposition of the single-draw OU estimator at one time point.
#[derive(Clone, Copy, Debug)]
pub struct DecayPoint {
    pub t: f64,
    pub squared_bias: f64,
    pub nonstationary: f64,
    pub persistent: f64,
}

/// Runs grouped replicate studies of the single-draw OU estimator at each
/// time in `ts`: `groups` point-mass starting values drawn from
/// normal(mu0, sigma0), `per_group` replicate paths from each, one exact
/// transition to time t, truth = the stationary mean. The squared bias should
/// decay like e^-2t and the nonstationary variance like sigma0^2 e^-2t.
pub fn ou_decay_study(
    spec: &OuProcessSpec,
    ts: &[f64],
    groups: usize,
    per_group: usize,
    seed: u64,
) -> Result<Vec<DecayPoint>> {
    spec.validate()?;
    if groups < 2 || per_group < 2 {
        return Err(Error::invalid("decay study needs >= 2 groups of >= 2"));
    }
    let starts: Vec<f64> = (0..groups)
        .map(|g| {
            let mut rng = StreamRng::for_step(seed, g as u64, tag::ORACLE, 0);
            let z: f64 = rng.sample(StandardNormal);
            spec.mu0 + spec.sigma0 * z
        })
        .collect();

    let mut out = Vec::with_capacity(ts.len());
    for (ti, &t) in ts.iter().enumerate() {
        if !(t > 0.0) {
            return Err(Error::invalid("decay study times must be positive"));
        }
        let mut estimates = Vec::with_capacity(groups * per_group);
        let mut ids = Vec::with_capacity(groups * per_group);
        for (g, &theta0) in starts.iter().enumerate() {
            for r in 0..per_group {
                let mut rng = StreamRng::from_key(&[
                    seed,
                    tag::ORACLE,
                    ti as u64,
                    g as u64,
                    r as u64 + 1,
                ]);
                estimates.push(ou_exact_step(spec, theta0, t, &mut rng)?);
                ids.push(g);
            }
        }
        let study = ReplicateStudy::grouped(estimates, ids)?;
        let err = error_decomposition(&study, spec.mu)?;
        let var = variance_decomposition(&study)?;
        out.push(DecayPoint {
            t,
            squared_bias: err.squared_bias,
            nonstationary: var.nonstationary,
            persistent: var.persistent,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::ols_slope;

    const SPEC_2301: OuProcessSpec = OuProcessSpec { mu0: 2.0, sigma0: 3.0, mu: 0.0, sigma: 1.0 };

    #[test]
    fn ou_marginal_fixtures() {
        let (m, s) = ou_marginal(&SPEC_2301, 0.0).unwrap();
        assert_eq!((m, s), (2.0, 3.0));

        let (m, s) = ou_marginal(&SPEC_2301, std::f64::consts::LN_2).unwrap();
        assert!((m - 1.0).abs() < 1e-14);
        assert!((s - 3f64.sqrt()).abs() < 1e-14);

        let (m, s) = ou_marginal(&SPEC_2301, 1e3).unwrap();
        assert!((m - 0.0).abs() < 1e-12);
        assert!((s - 1.0).abs() < 1e-12);

        assert!(ou_marginal(&SPEC_2301, -0.1).is_err());
    }

    #[test]
    fn ou_exact_step_conditional_moments() {
        let spec = OuProcessSpec { mu0: 0.0, sigma0: 0.0, mu: 0.0, sigma: 1.0 };
        let dt = std::f64::consts::LN_2;
        let n = 200_000;
        let mut rng = StreamRng::from_key(&[7, 7]);
        let draws: Vec<f64> = (0..n)
            .map(|_| ou_exact_step(&spec, 2.0, dt, &mut rng).unwrap())
            .collect();
        let m = mean(&draws);
        let sd = sample_variance(&draws).sqrt();
        assert!((m - 1.0).abs() < 4.0 * 0.75f64.sqrt() / (n as f64).sqrt(), "mean {m}");
        assert!((sd - 0.75f64.sqrt()).abs() < 0.005, "sd {sd}");
    }

    #[test]
    fn ou_step_tiny_dt_is_identity() {
        let spec = OuProcessSpec { mu0: 0.0, sigma0: 1.0, mu: 0.0, sigma: 1.0 };
        let mut rng = StreamRng::from_key(&[8, 8]);
        let x = ou_exact_step(&spec, 1.7, 1e-14, &mut rng).unwrap();
        assert!((x - 1.7).abs() < 1e-5);
    }

    #[test]
    fn ou_iterated_steps_match_marginal() {
        // Many replicas stepped to t = ln 2 from normal(2, 3) starts.
        let n = 100_000;
        let dt = std::f64::consts::LN_2 / 8.0;
        let mut draws = Vec::with_capacity(n);
        for r in 0..n {
            let mut rng = StreamRng::for_step(99, r as u64, tag::ORACLE, 1);
            let z: f64 = rng.sample(StandardNormal);
            let mut x = SPEC_2301.mu0 + SPEC_2301.sigma0 * z;
            for _ in 0..8 {
                x = ou_exact_step(&SPEC_2301, x, dt, &mut rng).unwrap();
            }
            draws.push(x);
        }
        let (true_mean, true_sd) = ou_marginal(&SPEC_2301, std::f64::consts::LN_2).unwrap();
        let m = mean(&draws);
        assert!(
            (m - true_mean).abs() < 4.0 * true_sd / (n as f64).sqrt(),
            "mean {m} vs {true_mean}"
        );
        let sd = sample_variance(&draws).sqrt();
        assert!((sd / true_sd - 1.0).abs() < 0.01, "sd {sd} vs {true_sd}");
    }

    #[test]
    fn erf_reference_values() {
        let cases = [
            (0.0, 0.0),
            (0.5, 0.5204998778130465),
            (1.0, 0.8427007929497149),
            (2.0, 0.9953222650189527),
            (3.0, 0.9999779095030014),
            (4.0, 0.9999999845827421),
        ];
        for (x, want) in cases {
            assert!((erf(x) - want).abs() < 1e-13, "erf({x}) = {}", erf(x));
            assert!((erf(-x) + want).abs() < 1e-13);
        }
        // Tail in relative terms.
        assert!((erfc(5.0) / 1.5374597944280351e-12 - 1.0).abs() < 1e-10);
    }

    #[test]
    fn normal_cdf_reference_values() {
        let cases = [
            (0.0, 0.5),
            (0.5, 0.6914624612740131),
            (1.96, 0.9750021048517795),
            (-1.0, 0.15865525393145707),
            (-4.0, 3.167124183311998e-5),
        ];
        for (x, want) in cases {
            assert!(
                (normal_cdf(x) - want).abs() < 1e-13,
                "Phi({x}) = {}",
                normal_cdf(x)
            );
        }
    }

    #[test]
    fn tv_identical_normals_is_zero() {
        assert!(tv_normal(0.3, 1.7, 0.3, 1.7).unwrap() < 1e-12);
    }

    #[test]
    fn tv_equal_sd_matches_closed_form() {
        let tv = tv_normal(0.0, 1.0, 1.0, 1.0).unwrap();
        let closed = 2.0 * normal_cdf(0.5) - 1.0;
        assert!((tv - closed).abs() < 1e-8, "{tv} vs {closed}");
        assert!((tv - 0.3829249225480263).abs() < 1e-6);
    }

    #[test]
    fn tv_unequal_sd_quadrature_value() {
        // Crossings at x = +- sqrt((8/3) ln 2); CDF differences give the truth.
        let tv = tv_normal(0.0, 1.0, 0.0, 2.0).unwrap();
        let x = (8.0 / 3.0 * std::f64::consts::LN_2).sqrt();
        let exact = 2.0 * (normal_cdf(x) - normal_cdf(x / 2.0));
        assert!((tv - exact).abs() < 1e-8, "{tv} vs {exact}");
        assert!((tv - 0.3229).abs() < 1e-3);
    }

    #[test]
    fn tv_far_separated_normals_saturate() {
        // Disjoint-support regimes must not fool the quadrature into
        // skipping the bumps.
        assert!((tv_normal(0.0, 1.0, 1000.0, 1.0).unwrap() - 1.0).abs() < 1e-8);
        assert!((tv_normal(0.0, 1.0, 50.0, 5.0).unwrap() - 1.0).abs() < 1e-8);
        assert!((tv_normal(-200.0, 0.01, 0.0, 1.0).unwrap() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn tv_quadrature_matches_cdf_route() {
        // Independent route: cutting the line at the density crossings makes
        // the integrand's sign constant per segment, so the integral is a
        // telescoping sum of CDF differences.
        let cdf_route = |m1: f64, s1: f64, m2: f64, s2: f64| -> f64 {
            let d = |x: f64| normal_cdf((x - m1) / s1) - normal_cdf((x - m2) / s2);
            let crossings = super::normal_crossings(m1, s1, m2, s2);
            let mut total = 0.0;
            let mut prev = 0.0;
            for x in &crossings {
                total += (d(*x) - prev).abs();
                prev = d(*x);
            }
            total += prev.abs();
            0.5 * total
        };
        let mut rng = StreamRng::from_key(&[0x7f, 9]);
        for _ in 0..50 {
            let m1 = 4.0 * rng.sample::<f64, _>(StandardNormal);
            let m2 = 4.0 * rng.sample::<f64, _>(StandardNormal);
            let s1 = (rng.random::<f64>() * 2.0 - 1.0).exp2() * 1.5;
            let s2 = (rng.random::<f64>() * 2.0 - 1.0).exp2() * 1.5;
            let quad = tv_normal(m1, s1, m2, s2).unwrap();
            let exact = cdf_route(m1, s1, m2, s2);
            assert!(
                (quad - exact).abs() < 1e-8,
                "({m1},{s1}) vs ({m2},{s2}): quadrature {quad}, cdf {exact}"
            );
        }
    }

    #[test]
    fn tv_symmetry_and_triangle() {
        let params = [
            (0.0, 1.0),
            (1.0, 1.0),
            (0.5, 2.0),
            (-2.0, 0.3),
            (3.0, 5.0),
        ];
        for &(m1, s1) in &params {
            for &(m2, s2) in &params {
                let ab = tv_normal(m1, s1, m2, s2).unwrap();
                let ba = tv_normal(m2, s2, m1, s1).unwrap();
                assert!((ab - ba).abs() < 1e-12);
                for &(m3, s3) in &params {
                    let ac = tv_normal(m1, s1, m3, s3).unwrap();
                    let cb = tv_normal(m3, s3, m2, s2).unwrap();
                    assert!(ab <= ac + cb + 1e-8);
                }
            }
        }
    }

    #[test]
    fn tv_bounds_indicator_bias() {
        // For f = 1(-inf, x], |E_p f - E_q f| = |Phi differences| <= TV.
        let cases = [(0.0, 1.0, 1.5, 1.0), (0.0, 1.0, 0.5, 2.0), (2.0, 3.0, 0.0, 1.0)];
        for (m1, s1, m2, s2) in cases {
            let tv = tv_normal(m1, s1, m2, s2).unwrap();
            for i in -20..=20 {
                let x = 0.4 * i as f64;
                let bias = (normal_cdf((x - m1) / s1) - normal_cdf((x - m2) / s2)).abs();
                assert!(bias <= tv + 1e-8, "x={x}: bias {bias} > tv {tv}");
            }
        }
    }

    #[test]
    fn tv_monotone_along_ou_relaxation() {
        let specs = [
            SPEC_2301,
            OuProcessSpec { mu0: 2.0, sigma0: 1.0, mu: 0.0, sigma: 1.0 },
            OuProcessSpec { mu0: -1.0, sigma0: 0.2, mu: 0.0, sigma: 2.0 },
        ];
        for spec in specs {
            let mut last = f64::INFINITY;
            for i in 0..=50 {
                let t = 0.1 * i as f64;
                let (m, s) = ou_marginal(&spec, t).unwrap();
                let tv = tv_normal(m, s, spec.mu, spec.sigma).unwrap();
                assert!(tv <= last + 1e-9, "t={t}: {tv} > {last}");
                last = tv;
            }
        }
    }

    #[test]
    fn relaxation_time_fixtures() {
        let stationary = OuProcessSpec { mu0: 0.0, sigma0: 1.0, mu: 0.0, sigma: 1.0 };
        assert_eq!(relaxation_time(&stationary, 0.1).unwrap(), 0.0);

        let spec = OuProcessSpec { mu0: 2.0, sigma0: 1.0, mu: 0.0, sigma: 1.0 };
        assert_eq!(relaxation_time(&spec, 0.999).unwrap(), 0.0);

        // Equal-sd path: solve 2 Phi(e^-t) - 1 = 0.1 independently.
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if 2.0 * normal_cdf(mid) - 1.0 > 0.1 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let expected = -(0.5 * (lo + hi)).ln();
        let got = relaxation_time(&spec, 0.1).unwrap();
        assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
        assert!((got - 2.074).abs() < 2e-3);
    }

    #[test]
    fn error_decomposition_fixtures() {
        let perfect = ReplicateStudy::new(vec![3.0, 3.0, 3.0]).unwrap();
        let d = error_decomposition(&perfect, 3.0).unwrap();
        assert_eq!((d.mse, d.squared_bias, d.variance), (0.0, 0.0, 0.0));

        let study = ReplicateStudy::new(vec![0.0, 2.0]).unwrap();
        let d = error_decomposition(&study, 0.0).unwrap();
        assert_eq!(d.mse, 2.0);
        assert_eq!(d.squared_bias, 1.0);
        assert_eq!(d.variance, 2.0);
        let r = 2.0;
        assert!((d.mse - (d.squared_bias + d.variance * (r - 1.0) / r)).abs() < 1e-15);

        assert!(ReplicateStudy::new(vec![1.0]).is_err());
    }

    #[test]
    fn error_decomposition_identity_on_random_studies() {
        let mut rng = StreamRng::from_key(&[55, 1]);
        for _ in 0..50 {
            let n = 2 + (rng.random::<f64>() * 40.0) as usize;
            let vals: Vec<f64> = (0..n)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * 3.0 + 1.0)
                .collect();
            let study = ReplicateStudy::new(vals).unwrap();
            let d = error_decomposition(&study, 0.7).unwrap();
            let r = n as f64;
            let recomposed = d.squared_bias + d.variance * (r - 1.0) / r;
            assert!((d.mse - recomposed).abs() < 1e-12 * d.mse.max(1.0));
        }
    }

    #[test]
    fn variance_decomposition_fixture() {
        let study =
            ReplicateStudy::grouped(vec![1.0, 3.0, 2.0, 4.0], vec![0, 0, 1, 1]).unwrap();
        let d = variance_decomposition(&study).unwrap();
        assert_eq!(d.nonstationary, 0.5);
        assert_eq!(d.persistent, 2.0);
        assert_eq!(d.total, 2.5);
    }

    #[test]
    fn variance_decomposition_degenerate_initialization() {
        // All groups share one starting point: nonstationary ~ 0.
        let spec = OuProcessSpec { mu0: 2.0, sigma0: 0.0, mu: 0.0, sigma: 1.0 };
        let t = 1.0;
        let mut estimates = Vec::new();
        let mut ids = Vec::new();
        for g in 0..20 {
            for r in 0..200 {
                let mut rng = StreamRng::from_key(&[3, g, r]);
                estimates.push(ou_exact_step(&spec, spec.mu0, t, &mut rng).unwrap());
                ids.push(g as usize);
            }
        }
        let study = ReplicateStudy::grouped(estimates, ids).unwrap();
        let d = variance_decomposition(&study).unwrap();
        assert!(
            d.nonstationary < 0.1 * d.persistent,
            "nonstationary {} vs persistent {}",
            d.nonstationary,
            d.persistent
        );
    }

    #[test]
    fn variance_decomposition_rejects_bad_grouping() {
        assert!(ReplicateStudy::grouped(vec![1.0, 2.0, 3.0], vec![0, 0, 1]).is_err());
        let ungrouped = ReplicateStudy::new(vec![1.0, 2.0]).unwrap();
        assert!(variance_decomposition(&ungrouped).is_err());
    }

    #[test]
    fn two_state_fixtures() {
        let a = two_state_analytics(0.5).unwrap();
        assert_eq!(a.ess_per_draw, 1.0);
        assert_eq!(a.tv_decay_factor, 0.0);

        let a = two_state_analytics(0.9).unwrap();
        assert!((a.ess_per_draw - 9.0).abs() < 1e-12);
        assert!((a.tv_decay_factor - 0.8).abs() < 1e-12);

        let a = two_state_analytics(0.1).unwrap();
        assert!((a.ess_per_draw - 1.0 / 9.0).abs() < 1e-12);
        assert!((a.tv_decay_factor - 0.8).abs() < 1e-12);

        assert!(two_state_analytics(0.0).is_err());
        assert!(two_state_analytics(1.1).is_err());
        assert!(two_state_analytics(1.0).unwrap().ess_per_draw.is_infinite());
    }

    #[test]
    fn decay_study_slopes_near_minus_two() {
        let spec = OuProcessSpec { mu0: 2.0, sigma0: 2.0, mu: 0.0, sigma: 1.0 };
        let ts: Vec<f64> = (1..=6).map(|i| 0.5 * i as f64).collect();
        let points = ou_decay_study(&spec, &ts, 200, 500, 424242).unwrap();
        let log_bias: Vec<f64> = points.iter().map(|p| p.squared_bias.ln()).collect();
        let log_ns: Vec<f64> = points.iter().map(|p| p.nonstationary.ln()).collect();
        let slope_bias = ols_slope(&ts, &log_bias);
        let slope_ns = ols_slope(&ts, &log_ns);
        assert!(
            (slope_bias + 2.0).abs() < 0.2,
            "squared-bias slope {slope_bias}"
        );
        assert!((slope_ns + 2.0).abs() < 0.2, "nonstationary slope {slope_ns}");
    }
}
