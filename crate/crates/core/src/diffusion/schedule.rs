use serde::{Deserialize, Serialize};

use crate::error::{LairError, Result};

/// Largest per-step beta allowed by the cosine schedule.
const MAX_COSINE_BETA: f64 = 0.999;
/// Offset of the cosine schedule.
const COSINE_OFFSET: f64 = 0.008;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    LinearBeta,
    Cosine,
}

/// Everything needed to rebuild a [`NoiseSchedule`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub num_steps: usize,
    pub kind: ScheduleKind,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl ScheduleConfig {
    pub fn linear(num_steps: usize, beta_min: f64, beta_max: f64) -> Self {
        ScheduleConfig {
            num_steps,
            kind: ScheduleKind::LinearBeta,
            beta_min,
            beta_max,
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.num_steps, self.kind, self.beta_min, self.beta_max)
    }
}

/// Variance-preserving noise schedule indexed by `t = 0..=T`.
///
/// `alpha[t]` and `sigma[t]` are the marginal signal and noise scales of
/// `q(x_t | x_0) = N(alpha_t x_0, sigma_t^2 I)`, `snr[t] = alpha_t^2 / sigma_t^2`
/// (`+inf` at `t = 0`) and `omega[t]` is the per-step weight applied to
/// denoising errors.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    num_steps: usize,
    betas: Vec<f64>,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
    snr: Vec<f64>,
    omega: Vec<f64>,
}

/// Builds a schedule of `num_steps` steps.
///
/// For `LinearBeta`, betas are evenly spaced in `[beta_min, beta_max]`. For
/// `Cosine` the beta range is ignored.
pub fn make_schedule(
    num_steps: usize,
    kind: ScheduleKind,
    beta_min: f64,
    beta_max: f64,
) -> Result<NoiseSchedule> {
    if num_steps < 2 {
        return Err(LairError::Config(format!(
            "schedule needs at least 2 steps, got {num_steps}"
        )));
    }
    let betas = match kind {
        ScheduleKind::LinearBeta => {
            if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
                return Err(LairError::Config(format!(
                    "linear beta range must satisfy 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
                )));
            }
            let span = (num_steps - 1) as f64;
            (0..num_steps)
                .map(|i| beta_min + (beta_max - beta_min) * i as f64 / span)
                .collect::<Vec<_>>()
        }
        ScheduleKind::Cosine => {
            let f = |t: f64| {
                let arg = (t / num_steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                (arg * std::f64::consts::FRAC_PI_2).cos().powi(2)
            };
            (1..=num_steps)
                .map(|t| (1.0 - f(t as f64) / f((t - 1) as f64)).clamp(1e-8, MAX_COSINE_BETA))
                .collect()
        }
    };
    NoiseSchedule::from_betas(&betas)
}

impl NoiseSchedule {
    /// Builds a schedule from per-step betas `beta_1..=beta_T`. Accepts a single
    /// step, which `make_schedule` does not.
    pub fn from_betas(betas: &[f64]) -> Result<Self> {
        if betas.is_empty() {
            return Err(LairError::Config("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(LairError::Config(format!("beta {b} outside (0, 1)")));
        }
        let n = betas.len();
        let mut alpha = Vec::with_capacity(n + 1);
        let mut sigma = Vec::with_capacity(n + 1);
        let mut snr = Vec::with_capacity(n + 1);
        alpha.push(1.0);
        sigma.push(0.0);
        snr.push(f64::INFINITY);
        // log of the cumulative product keeps 1 - alpha_bar accurate for tiny betas
        let mut log_alpha_bar = 0.0f64;
        for &b in betas {
            log_alpha_bar += (-b).ln_1p();
            let a2 = log_alpha_bar.exp();
            let s2 = -log_alpha_bar.exp_m1();
            alpha.push(a2.sqrt());
            sigma.push(s2.sqrt());
            snr.push(a2 / s2);
        }
        let mut full_betas = Vec::with_capacity(n + 1);
        full_betas.push(0.0);
        full_betas.extend_from_slice(betas);
        Ok(NoiseSchedule {
            num_steps: n,
            betas: full_betas,
            alpha,
            sigma,
            snr,
            omega: vec![1.0; n + 1],
        })
    }

    /// Replaces the timestep weight with a positive constant.
    pub fn with_constant_omega(mut self, omega: f64) -> Result<Self> {
        if !(omega > 0.0 && omega.is_finite()) {
            return Err(LairError::Config(format!(
                "omega must be positive, got {omega}"
            )));
        }
        self.omega.iter_mut().for_each(|w| *w = omega);
        Ok(self)
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    /// Per-step beta; `beta(0) == 0`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn snr(&self, t: usize) -> f64 {
        self.snr[t]
    }

    pub fn omega(&self, t: usize) -> f64 {
        self.omega[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    pub(crate) fn check_timestep(&self, t: usize) -> Result<()> {
        if t > self.num_steps {
            return Err(LairError::Config(format!(
                "timestep {t} outside 0..={}",
                self.num_steps
            )));
        }
        Ok(())
    }
}

/// `alpha_t * x0 + sigma_t * eps`.
pub fn forward_noise(x0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    if eps.len() != x0.len() {
        return Err(LairError::shape("forward_noise eps", x0.len(), eps.len()));
    }
    sched.check_timestep(t)?;
    let (a, s) = (sched.alpha(t), sched.sigma(t));
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn linear_schedule_matches_high_precision_products() {
        // sqrt of the cumulative product of (1 - beta), evaluated with 50-digit arithmetic.
        let sched = make_schedule(1000, ScheduleKind::LinearBeta, 1e-4, 0.02).unwrap();
        let expected = [
            (1, 0.999_949_998_749_937_5, 0.010_000_000_000_000_000),
            (10, 0.999_052_153_186_126_0, 0.043_529_245_504_205_344),
            (100, 0.947_110_418_945_415_4, 0.320_907_859_556_352_47),
            (500, 0.280_334_162_887_398_07, 0.959_902_472_711_796_8),
            (1000, 0.006_352_818_087_570_021_4, 0.999_979_820_647_569_9),
        ];
        for (t, a, s) in expected {
            assert!(rel(sched.alpha(t), a) < 1e-10, "alpha_{t}");
            assert!(rel(sched.sigma(t), s) < 1e-10, "sigma_{t}");
        }
    }

    #[test]
    fn schedule_invariants_hold() {
        for kind in [ScheduleKind::LinearBeta, ScheduleKind::Cosine] {
            let sched = make_schedule(200, kind, 1e-4, 0.02).unwrap();
            assert_eq!(sched.alpha(0), 1.0);
            assert_eq!(sched.sigma(0), 0.0);
            assert!(sched.snr(0).is_infinite());
            for t in 1..=200 {
                assert!(sched.alpha(t) < sched.alpha(t - 1), "{kind:?} alpha at {t}");
                assert!(sched.sigma(t) > sched.sigma(t - 1), "{kind:?} sigma at {t}");
                assert!(sched.alpha(t) > 0.0);
                let snr = sched.alpha(t).powi(2) / sched.sigma(t).powi(2);
                assert!(rel(sched.snr(t), snr) <= 1e-12);
                assert!(sched.omega(t) > 0.0);
            }
        }
    }

    #[test]
    fn two_step_hand_values() {
        let sched = make_schedule(2, ScheduleKind::LinearBeta, 0.5, 0.5).unwrap();
        assert!((sched.alpha(1) - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((sched.sigma(1) - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((sched.alpha(2) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(matches!(
            make_schedule(1, ScheduleKind::LinearBeta, 1e-4, 0.02),
            Err(LairError::Config(_))
        ));
        assert!(make_schedule(10, ScheduleKind::LinearBeta, 0.0, 0.02).is_err());
        assert!(make_schedule(10, ScheduleKind::LinearBeta, 0.03, 0.02).is_err());
        assert!(make_schedule(10, ScheduleKind::LinearBeta, 1e-4, 1.0).is_err());
        assert!(NoiseSchedule::from_betas(&[0.3]).is_ok());
    }

    #[test]
    fn forward_noise_boundaries() {
        let sched = make_schedule(50, ScheduleKind::LinearBeta, 1e-4, 0.02).unwrap();
        let x0 = [0.3, -1.2];
        let eps = [1.5, 0.25];
        assert_eq!(forward_noise(&x0, 0, &eps, &sched).unwrap(), x0.to_vec());
        let zero = forward_noise(&[0.0, 0.0], 17, &eps, &sched).unwrap();
        assert_eq!(zero, vec![sched.sigma(17) * 1.5, sched.sigma(17) * 0.25]);
        assert!(matches!(
            forward_noise(&x0, 3, &[1.0], &sched),
            Err(LairError::Shape { .. })
        ));
        assert!(forward_noise(&x0, 51, &eps, &sched).is_err());
    }

    proptest! {
        #[test]
        fn forward_noise_is_elementwise_affine(
            x0 in proptest::collection::vec(-5.0f64..5.0, 2),
            eps in proptest::collection::vec(-4.0f64..4.0, 2),
            t in 0usize..=100,
            k in -3.0f64..3.0,
        ) {
            let sched = make_schedule(100, ScheduleKind::Cosine, 0.0, 0.0).unwrap();
            let xt = forward_noise(&x0, t, &eps, &sched).unwrap();
            for i in 0..2 {
                prop_assert_eq!(xt[i], sched.alpha(t) * x0[i] + sched.sigma(t) * eps[i]);
            }
            // linearity in both arguments
            let sx: Vec<f64> = x0.iter().map(|v| k * v).collect();
            let se: Vec<f64> = eps.iter().map(|v| k * v).collect();
            let scaled = forward_noise(&sx, t, &se, &sched).unwrap();
            for i in 0..2 {
                prop_assert!((scaled[i] - k * xt[i]).abs() <= 1e-12 * (1.0 + xt[i].abs()));
            }
        }
    }
}
