//! Denoising errors and the implicit reward of the policy relative to the
//! frozen reference: `s = omega(lambda_t) * (l_ref - l_theta)`.

use ndarray::Array2;
use rand::Rng as _;

use crate::diffusion::{forward_noise, DenoiserModel, ForwardCache, NoiseSchedule};
use crate::error::{LairError, Result};
use crate::rng::{gaussian_vec, stream_rng, Stream};

/// One sampled implicit-reward contribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImplicitRewardSample {
    pub s: f64,
    pub l_theta: f64,
    pub l_ref: f64,
    pub t: usize,
    pub index: usize,
}

/// Contributions for every candidate of one group at a shared timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitRewardBatch {
    pub prompt_id: String,
    pub t: usize,
    pub samples: Vec<ImplicitRewardSample>,
}

impl ImplicitRewardBatch {
    pub fn values(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.s).collect()
    }
}

/// `||eps_hat - eps||^2`.
pub fn denoise_error(eps_hat: &[f64], eps: &[f64]) -> Result<f64> {
    if eps_hat.len() != eps.len() {
        return Err(LairError::shape("denoise_error", eps.len(), eps_hat.len()));
    }
    Ok(eps_hat
        .iter()
        .zip(eps)
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

pub(crate) fn require_frozen(reference: &DenoiserModel) -> Result<()> {
    if !reference.is_frozen() {
        return Err(LairError::Contract(
            "reference model must be a frozen snapshot".into(),
        ));
    }
    Ok(())
}

/// Policy and reference predictions for a set of candidates noised at one `t`.
pub(crate) struct GroupForward {
    pub samples: Vec<ImplicitRewardSample>,
    /// `eps_theta - eps`, one row per candidate.
    pub policy_residual: Array2<f64>,
    pub cache: ForwardCache,
}

pub(crate) fn group_forward(
    model: &DenoiserModel,
    reference: &DenoiserModel,
    x0s: &[&[f64]],
    c: &[f64],
    t: usize,
    eps_list: &[Vec<f64>],
    sched: &NoiseSchedule,
) -> Result<GroupForward> {
    require_frozen(reference)?;
    if eps_list.len() != x0s.len() {
        return Err(LairError::shape(
            "noise draws per group",
            x0s.len(),
            eps_list.len(),
        ));
    }
    let arch = model.arch();
    if reference.arch() != arch {
        return Err(LairError::Contract(
            "policy and reference architectures differ".into(),
        ));
    }
    if c.len() != arch.cond_dim {
        return Err(LairError::shape(
            "condition dimension",
            arch.cond_dim,
            c.len(),
        ));
    }
    let n = x0s.len();
    let d = arch.data_dim;
    let mut xt = Array2::zeros((n, d));
    let mut eps = Array2::zeros((n, d));
    for (r, (x0, e)) in x0s.iter().zip(eps_list).enumerate() {
        let noised = forward_noise(x0, t, e, sched)?;
        if noised.len() != d {
            return Err(LairError::shape("x0 dimension", d, noised.len()));
        }
        for k in 0..d {
            xt[[r, k]] = noised[k];
            eps[[r, k]] = e[k];
        }
    }
    let mut cond = Array2::zeros((n, c.len()));
    for mut row in cond.rows_mut() {
        row.iter_mut().zip(c).for_each(|(v, ci)| *v = *ci);
    }
    let ts = vec![t; n];
    let (policy, cache) = model.forward_batch(xt.view(), &ts, cond.view())?;
    let ref_pred = reference.predict_batch(xt.view(), &ts, cond.view())?;
    let omega = sched.omega(t);
    let policy_residual = &policy - &eps;
    let samples = (0..n)
        .map(|i| {
            let l_theta: f64 = policy_residual.row(i).iter().map(|v| v * v).sum();
            let l_ref: f64 = ref_pred
                .row(i)
                .iter()
                .zip(eps.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            ImplicitRewardSample {
                s: omega * (l_ref - l_theta),
                l_theta,
                l_ref,
                t,
                index: i,
            }
        })
        .collect();
    Ok(GroupForward {
        samples,
        policy_residual,
        cache,
    })
}

/// Single contribution `s_theta(x0, x_t, t, c, eps)` with `x_t = forward_noise(x0, t, eps)`.
pub fn implicit_reward_sample(
    model: &DenoiserModel,
    reference: &DenoiserModel,
    x0: &[f64],
    c: &[f64],
    t: usize,
    eps: &[f64],
    sched: &NoiseSchedule,
) -> Result<ImplicitRewardSample> {
    let fwd = group_forward(model, reference, &[x0], c, t, &[eps.to_vec()], sched)?;
    Ok(fwd.samples[0])
}

/// Contributions for every candidate of a group at a shared `t`.
pub fn implicit_reward_batch(
    model: &DenoiserModel,
    reference: &DenoiserModel,
    prompt_id: &str,
    x0s: &[&[f64]],
    c: &[f64],
    t: usize,
    eps_list: &[Vec<f64>],
    sched: &NoiseSchedule,
) -> Result<ImplicitRewardBatch> {
    let fwd = group_forward(model, reference, x0s, c, t, eps_list, sched)?;
    Ok(ImplicitRewardBatch {
        prompt_id: prompt_id.to_string(),
        t,
        samples: fwd.samples,
    })
}

/// Monte-Carlo estimate of the clean-level score with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub draws: usize,
}

/// Mean and standard error of `draws` samples of `s` with `t ~ U{1..T}` and
/// Gaussian noise, all drawn from the diagnostics stream of `seed`.
pub fn implicit_reward_estimate(
    model: &DenoiserModel,
    reference: &DenoiserModel,
    x0: &[f64],
    c: &[f64],
    sched: &NoiseSchedule,
    draws: usize,
    seed: u64,
) -> Result<ScoreEstimate> {
    if draws == 0 {
        return Err(LairError::Config(
            "need at least one Monte-Carlo draw".into(),
        ));
    }
    let mut rng = stream_rng(seed, Stream::Diagnostics);
    let mut values = Vec::with_capacity(draws);
    for _ in 0..draws {
        let t = rng.random_range(1..=sched.num_steps());
        let eps = gaussian_vec(&mut rng, x0.len());
        values.push(implicit_reward_sample(model, reference, x0, c, t, &eps, sched)?.s);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(ScoreEstimate {
        mean,
        std_error: (var / n).sqrt(),
        draws,
    })
}

/// Monte-Carlo estimate of `S_theta(x0, c) = E_{t, eps}[s_theta]`.
pub fn implicit_reward_expectation(
    model: &DenoiserModel,
    reference: &DenoiserModel,
    x0: &[f64],
    c: &[f64],
    sched: &NoiseSchedule,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    implicit_reward_estimate(model, reference, x0, c, sched, draws, seed).map(|e| e.mean)
}
