//! Numerical checks of the listwise objective's closed-form optimum, its
//! finite-list range, the surrogate KL bound of the induced tilt, and the
//! contrast with the pairwise logistic objective whose optimum is unbounded.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{LairError, Result};
use crate::objectives::{dpo_pair_grad, lair_grad_in_s, lair_loss_in_s};
use crate::rng::{stream_rng, Rng, Stream};
use crate::weights::advantage_weights;

/// Absolute slack allowed on every inequality check.
pub const INEQUALITY_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDistribution {
    probs: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(LairError::Config(format!(
                "distribution needs at least 2 states, got {}",
                probs.len()
            )));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(LairError::Config(
                "probabilities must be finite and non-negative".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(LairError::Config(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        Ok(DiscreteDistribution { probs })
    }

    pub fn uniform(k: usize) -> Result<Self> {
        Self::new(vec![1.0 / k as f64; k])
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Scores to tilt by, the scale `eta`, and an upper bound `delta` on their range.
#[derive(Debug, Clone, PartialEq)]
pub struct TiltSpec {
    pub scores: Vec<f64>,
    pub eta: f64,
    pub delta: f64,
}

impl TiltSpec {
    /// Uses the exact score range as `delta`.
    pub fn tight(scores: Vec<f64>, eta: f64) -> Self {
        let delta = score_range(&scores);
        TiltSpec { scores, eta, delta }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(LairError::Config(format!(
                "eta must be positive, got {}",
                self.eta
            )));
        }
        if self.scores.iter().any(|s| !s.is_finite()) {
            return Err(LairError::NonFinite("tilt scores"));
        }
        let range = score_range(&self.scores);
        // a bound derived in exact arithmetic may sit an ulp or so below the rounded range
        if range - self.delta > 1e-12 * range.max(1.0) {
            return Err(LairError::Config(format!(
                "delta {} is below the score range {range}",
                self.delta
            )));
        }
        Ok(())
    }
}

fn score_range(scores: &[f64]) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}

/// `s*_i = N_c / (2 lambda) * w_i`.
pub fn closed_form_optimum(w: &[f64], lambda_reg: f64) -> Result<Vec<f64>> {
    if !(lambda_reg > 0.0 && lambda_reg.is_finite()) {
        return Err(LairError::Config(format!(
            "lambda must be positive, got {lambda_reg}"
        )));
    }
    if w.len() < 2 {
        return Err(LairError::GroupSize(w.len()));
    }
    let scale = w.len() as f64 / (2.0 * lambda_reg);
    Ok(w.iter().map(|wi| scale * wi).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimumReport {
    /// Minimizer found coordinate-wise from three loss evaluations per axis.
    pub coordinate_solution: Vec<f64>,
    /// Minimizer found by gradient descent from a random start.
    pub descent_solution: Vec<f64>,
    pub descent_iterations: usize,
    pub max_rel_deviation: f64,
    pub solution_sum: f64,
    pub passed: bool,
}

fn relative_deviation(numeric: &[f64], exact: &[f64]) -> f64 {
    // scaled by the optimum's magnitude (at least 1) so all-zero optima are measurable
    let scale = exact.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    numeric
        .iter()
        .zip(exact)
        .map(|(a, b)| (a - b).abs() / scale)
        .fold(0.0, f64::max)
}

/// Minimizes the listwise loss in `s`-space without using the closed form
/// and compares against it.
///
/// Route one treats each axis separately: the loss is exactly quadratic
/// along an axis, so the vertex of the parabola through three evaluations is
/// that coordinate's minimizer. Route two is gradient descent with step
/// `N_c / (4 lambda)` from a random start. Deviations are relative to
/// `max(1, max |s*|)`.
pub fn verify_optimum_numerically(
    w: &[f64],
    lambda_reg: f64,
    tol: f64,
    rng: &mut Rng,
) -> Result<OptimumReport> {
    if !(tol > 0.0) {
        return Err(LairError::Config(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    let exact = closed_form_optimum(w, lambda_reg)?;
    let n = w.len();
    let scale = n as f64 / (2.0 * lambda_reg);

    let zeros = vec![0.0; n];
    let mut coordinate_solution = vec![0.0; n];
    for i in 0..n {
        let eval = |x: f64| {
            let mut s = zeros.clone();
            s[i] = x;
            lair_loss_in_s(&s, w, lambda_reg)
        };
        let h = scale;
        let (f_minus, f_zero, f_plus) = (eval(-h)?, eval(0.0)?, eval(h)?);
        let curvature = f_plus - 2.0 * f_zero + f_minus;
        if !(curvature > 0.0) {
            return Err(LairError::Verification(format!(
                "axis {i} is not strictly convex (second difference {curvature})"
            )));
        }
        coordinate_solution[i] = -h * (f_plus - f_minus) / (2.0 * curvature);
    }

    let step = n as f64 / (4.0 * lambda_reg);
    let mut s: Vec<f64> = (0..n)
        .map(|_| rng.random_range(-1.0..1.0) * scale)
        .collect();
    let grad_tol = 1e-12 * (1.0 + w.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    let max_iters = 10_000;
    let mut iterations = 0;
    loop {
        let g = lair_grad_in_s(&s, w, lambda_reg)?;
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= grad_tol {
            break;
        }
        if iterations == max_iters {
            return Err(LairError::Verification(format!(
                "gradient descent did not converge in {max_iters} iterations (gradient norm {norm:e})"
            )));
        }
        s.iter_mut().zip(&g).for_each(|(si, gi)| *si -= step * gi);
        iterations += 1;
    }

    let max_rel_deviation =
        relative_deviation(&coordinate_solution, &exact).max(relative_deviation(&s, &exact));
    Ok(OptimumReport {
        solution_sum: s.iter().sum(),
        passed: max_rel_deviation <= tol,
        coordinate_solution,
        descent_solution: s,
        descent_iterations: iterations,
        max_rel_deviation,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeReport {
    pub lower: f64,
    pub upper: f64,
    pub range: f64,
    pub range_bound: f64,
    /// Smallest distance to any of the three bounds; negative means violated.
    pub worst_slack: f64,
    pub passed: bool,
}

/// Checks `-1/(2 lambda) <= s*_i <= (N_c - 1)/(2 lambda)` and
/// `max - min <= N_c / (2 lambda)` for the closed-form optimum.
pub fn finite_list_range_check(w: &[f64], lambda_reg: f64) -> Result<RangeReport> {
    let s = closed_form_optimum(w, lambda_reg)?;
    let n = w.len() as f64;
    let lo_bound = -1.0 / (2.0 * lambda_reg);
    let hi_bound = (n - 1.0) / (2.0 * lambda_reg);
    let range_bound = n / (2.0 * lambda_reg);
    let lower = s.iter().copied().fold(f64::INFINITY, f64::min);
    let upper = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = upper - lower;
    let worst_slack = (lower - lo_bound)
        .min(hi_bound - upper)
        .min(range_bound - range);
    Ok(RangeReport {
        lower,
        upper,
        range,
        range_bound,
        worst_slack,
        passed: worst_slack >= -INEQUALITY_SLACK,
    })
}

/// `p_ref * exp(S / eta)`, normalized with the maximum exponent subtracted.
pub fn tilted_distribution(
    p_ref: &DiscreteDistribution,
    tilt: &TiltSpec,
) -> Result<DiscreteDistribution> {
    tilt.validate()?;
    if tilt.scores.len() != p_ref.len() {
        return Err(LairError::shape(
            "tilt scores",
            p_ref.len(),
            tilt.scores.len(),
        ));
    }
    if p_ref.probs().iter().any(|p| *p <= 0.0) {
        return Err(LairError::Contract(
            "reference distribution must have full support".into(),
        ));
    }
    let logits: Vec<f64> = p_ref
        .probs()
        .iter()
        .zip(&tilt.scores)
        .map(|(p, s)| p.ln() + s / tilt.eta)
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = unnorm.iter().sum();
    let mut probs: Vec<f64> = unnorm.iter().map(|u| u / z).collect();
    // absorb rounding so the invariant holds to 1e-12
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    DiscreteDistribution::new(probs)
}

/// `sum_i p_i log(p_i / q_i)` with `0 log 0 = 0`.
pub fn kl_divergence(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<f64> {
    if p.len() != q.len() {
        return Err(LairError::shape("kl_divergence", q.len(), p.len()));
    }
    let mut total = 0.0;
    for (pi, qi) in p.probs().iter().zip(q.probs()) {
        if *pi == 0.0 {
            continue;
        }
        if *qi == 0.0 {
            return Err(LairError::Contract(
                "support of p is not contained in support of q".into(),
            ));
        }
        total += pi * (pi / qi).ln();
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlBoundReport {
    pub kl: f64,
    pub bound: f64,
    pub slack: f64,
    /// `N_c / (2 lambda eta)`, present when the scores are a closed-form optimum.
    pub specialized_bound: Option<f64>,
    pub passed: bool,
}

/// Checks `KL(tilted || p_ref) <= delta / eta`.
pub fn verify_kl_bound(p_ref: &DiscreteDistribution, tilt: &TiltSpec) -> Result<KlBoundReport> {
    let tilted = tilted_distribution(p_ref, tilt)?;
    let kl = kl_divergence(&tilted, p_ref)?;
    let bound = tilt.delta / tilt.eta;
    let slack = bound - kl;
    Ok(KlBoundReport {
        kl,
        bound,
        slack,
        specialized_bound: None,
        passed: slack >= -INEQUALITY_SLACK,
    })
}

/// Maps the closed-form optimum of `w` onto `N_c` equally likely states and
/// checks both `delta / eta` and `N_c / (2 lambda eta)`.
pub fn verify_kl_bound_for_optimum(w: &[f64], lambda_reg: f64, eta: f64) -> Result<KlBoundReport> {
    let scores = closed_form_optimum(w, lambda_reg)?;
    let n = w.len();
    let delta = n as f64 / (2.0 * lambda_reg);
    let tilt = TiltSpec { scores, eta, delta };
    let mut report = verify_kl_bound(&DiscreteDistribution::uniform(n)?, &tilt)?;
    let specialized = n as f64 / (2.0 * lambda_reg * eta);
    report.specialized_bound = Some(specialized);
    report.slack = report.slack.min(specialized - report.kl);
    report.passed = report.slack >= -INEQUALITY_SLACK;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnboundednessReport {
    pub beta: f64,
    pub steps: usize,
    pub step_size: f64,
    /// Margin `s_w - s_l` after every step (index 0 is the start).
    pub margins: Vec<f64>,
    pub final_margin: f64,
    pub margin_strictly_increasing: bool,
    pub final_dpo_grad_norm: f64,
    pub lair_lambda: f64,
    pub lair_solution: [f64; 2],
    pub lair_target: [f64; 2],
    pub lair_grad_norm: f64,
    pub lair_iterations: usize,
}

/// Gradient descent on the pairwise logistic loss over free `(s_w, s_l)`
/// from the origin, next to descent on the listwise loss for the same pair.
///
/// The listwise side uses weights `(0.25, -0.25)` (a pair whose rewards
/// differ by `ln 3` at unit temperature), strength `lair_lambda`, and step
/// `N_c / (4 lambda)`, iterating until the gradient norm is at most `1e-8`.
pub fn dpo_unboundedness_demo(
    beta: f64,
    steps: usize,
    step_size: f64,
    lair_lambda: f64,
) -> Result<UnboundednessReport> {
    if steps == 0 {
        return Err(LairError::Config("need at least one descent step".into()));
    }
    if !(beta > 0.0 && step_size > 0.0) {
        return Err(LairError::Config(
            "beta and step size must be positive".into(),
        ));
    }
    let (mut s_w, mut s_l) = (0.0f64, 0.0f64);
    let mut margins = Vec::with_capacity(steps + 1);
    margins.push(0.0);
    for _ in 0..steps {
        let (gw, gl) = dpo_pair_grad(s_w, s_l, beta);
        s_w -= step_size * gw;
        s_l -= step_size * gl;
        margins.push(s_w - s_l);
    }
    let (gw, gl) = dpo_pair_grad(s_w, s_l, beta);
    let margin_strictly_increasing = margins.windows(2).all(|m| m[1] > m[0]);

    let w = [0.25, -0.25];
    let target = closed_form_optimum(&w, lair_lambda)?;
    let step = w.len() as f64 / (4.0 * lair_lambda);
    let mut s = [0.0f64, 0.0];
    let mut lair_iterations = 0;
    let lair_grad_norm = loop {
        let g = lair_grad_in_s(&s, &w, lair_lambda)?;
        let norm = (g[0] * g[0] + g[1] * g[1]).sqrt();
        if norm <= 1e-8 || lair_iterations == 100_000 {
            break norm;
        }
        s[0] -= step * g[0];
        s[1] -= step * g[1];
        lair_iterations += 1;
    };

    Ok(UnboundednessReport {
        beta,
        steps,
        step_size,
        final_margin: *margins.last().expect("non-empty"),
        margins,
        margin_strictly_increasing,
        final_dpo_grad_norm: (gw * gw + gl * gl).sqrt(),
        lair_lambda,
        lair_solution: s,
        lair_target: [target[0], target[1]],
        lair_grad_norm,
        lair_iterations,
    })
}

/// Summary of one verification suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    /// Worst value of the suite's figure of merit (deviation or slack).
    pub worst: f64,
    pub metric: String,
    pub passed: bool,
}

/// Random centered weights from rewards in `[-3, 3]`, `tau in [0.01, 1]`, `N_c in [2, 30]`.
pub fn random_weights(rng: &mut Rng) -> Result<Vec<f64>> {
    let n = rng.random_range(2..=30);
    let tau = rng.random_range(0.01..=1.0);
    let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    Ok(advantage_weights(&rewards, tau)?.w)
}

/// `lambda` log-uniform in `[1e-4, 1]`.
pub fn random_lambda(rng: &mut Rng) -> f64 {
    10f64.powf(rng.random_range(-4.0..=0.0))
}

pub fn optimum_suite(cases: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = stream_rng(seed, Stream::Verify);
    let mut worst = 0.0f64;
    let mut failures = 0;
    for _ in 0..cases {
        let w = random_weights(&mut rng)?;
        let lambda = random_lambda(&mut rng);
        let report = verify_optimum_numerically(&w, lambda, 1e-6, &mut rng)?;
        let sum_ok = report.solution_sum.abs() <= 1e-9 * (1.0 + w.len() as f64 / (2.0 * lambda));
        worst = worst.max(report.max_rel_deviation);
        if !(report.passed && sum_ok) {
            failures += 1;
        }
    }
    Ok(SuiteReport {
        name: "closed-form optimum".into(),
        cases,
        failures,
        worst,
        metric: "max relative deviation".into(),
        passed: failures == 0,
    })
}

pub fn range_suite(cases: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = stream_rng(seed.wrapping_add(1), Stream::Verify);
    let mut worst = f64::INFINITY;
    let mut failures = 0;
    for _ in 0..cases {
        let w = random_weights(&mut rng)?;
        let lambda = random_lambda(&mut rng);
        let zero_sum = w.iter().sum::<f64>().abs() <= 1e-12;
        let report = finite_list_range_check(&w, lambda)?;
        worst = worst.min(report.worst_slack);
        if !(report.passed && zero_sum) {
            failures += 1;
        }
    }
    Ok(SuiteReport {
        name: "finite-list range".into(),
        cases,
        failures,
        worst,
        metric: "min slack".into(),
        passed: failures == 0,
    })
}

pub fn kl_suite(cases: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = stream_rng(seed.wrapping_add(2), Stream::Verify);
    let mut worst = f64::INFINITY;
    let mut failures = 0;
    for _ in 0..cases {
        let k = rng.random_range(2..=50);
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(1e-3..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let p_ref = DiscreteDistribution::new(raw.iter().map(|v| v / total).collect())?;
        let half_width = 10f64.powf(rng.random_range(-2.0..3.0));
        let scores: Vec<f64> = (0..k)
            .map(|_| rng.random_range(-half_width..half_width))
            .collect();
        let eta = 10f64.powf(rng.random_range(-2.0..3.0));
        let report = verify_kl_bound(&p_ref, &TiltSpec::tight(scores, eta))?;
        worst = worst.min(report.slack);
        failures += usize::from(!report.passed);

        let w = random_weights(&mut rng)?;
        let lambda = random_lambda(&mut rng);
        let report = verify_kl_bound_for_optimum(&w, lambda, eta)?;
        worst = worst.min(report.slack);
        failures += usize::from(!report.passed);
    }
    Ok(SuiteReport {
        name: "surrogate KL bound".into(),
        cases: 2 * cases,
        failures,
        worst,
        metric: "min slack".into(),
        passed: failures == 0,
    })
}

/// Parameters of the pairwise-vs-listwise contrast run by [`unboundedness_suite`].
pub const DEMO_BETA: f64 = 1e-3;
pub const DEMO_STEP: f64 = 1e3;
pub const DEMO_STEPS: usize = 10_000;
pub const DEMO_LAMBDA: f64 = 0.00025;

pub fn unboundedness_suite() -> Result<(SuiteReport, UnboundednessReport)> {
    let demo = dpo_unboundedness_demo(DEMO_BETA, DEMO_STEPS, DEMO_STEP, DEMO_LAMBDA)?;
    let lair_err = demo
        .lair_solution
        .iter()
        .zip(&demo.lair_target)
        .map(|(a, b)| (a - b).abs() / b.abs())
        .fold(0.0, f64::max);
    let passed = demo.margin_strictly_increasing
        && demo.final_margin > 1e3
        && demo.lair_grad_norm <= 1e-8
        && lair_err <= 1e-6;
    Ok((
        SuiteReport {
            name: "pairwise unboundedness".into(),
            cases: 1,
            failures: usize::from(!passed),
            worst: demo.final_margin,
            metric: "final pairwise margin".into(),
            passed,
        },
        demo,
    ))
}
