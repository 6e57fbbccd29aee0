//! The listwise objective over sampled implicit rewards,
//!
//! ```text
//! J(s) = -sum_i w_i s_i + (lambda / N_c) sum_i s_i^2
//! ```
//!
//! both in free `s`-space and through the denoiser's parameters, plus the
//! pairwise Diffusion-DPO baseline `-log sigmoid(beta (s_w - s_l))`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{CandidateGroup, PairRecord};
use crate::diffusion::{denoising_loss_grad, DenoiserModel, DenoisingExample, NoiseSchedule};
use crate::error::{LairError, Result};
use crate::implicit_reward::{group_forward, ImplicitRewardBatch};
use crate::weights::{advantage_weights, AdvantageWeights};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LairConfig {
    pub lambda_reg: f64,
    pub tau: f64,
    pub max_list_size: usize,
    pub beta_dpo: f64,
}

impl Default for LairConfig {
    fn default() -> Self {
        LairConfig {
            lambda_reg: 0.00025,
            tau: 0.05,
            max_list_size: 30,
            beta_dpo: 1.0,
        }
    }
}

impl LairConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda", self.lambda_reg),
            ("tau", self.tau),
            ("beta", self.beta_dpo),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(LairError::Config(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if self.max_list_size < 2 {
            return Err(LairError::Config(format!(
                "maximum list size must be at least 2, got {}",
                self.max_list_size
            )));
        }
        Ok(())
    }
}

fn check_lengths(s: &[f64], w: &[f64]) -> Result<()> {
    if s.len() != w.len() {
        return Err(LairError::shape(
            "implicit rewards vs weights",
            w.len(),
            s.len(),
        ));
    }
    if w.len() < 2 {
        return Err(LairError::GroupSize(w.len()));
    }
    Ok(())
}

pub fn lair_loss_in_s(s: &[f64], w: &[f64], lambda_reg: f64) -> Result<f64> {
    check_lengths(s, w)?;
    let n = w.len() as f64;
    let linear: f64 = s.iter().zip(w).map(|(si, wi)| wi * si).sum();
    let penalty: f64 = s.iter().map(|si| si * si).sum();
    Ok(-linear + lambda_reg / n * penalty)
}

/// `dJ/ds_i = -w_i + (2 lambda / N_c) s_i`.
pub fn lair_grad_in_s(s: &[f64], w: &[f64], lambda_reg: f64) -> Result<Vec<f64>> {
    check_lengths(s, w)?;
    let n = w.len() as f64;
    Ok(s.iter()
        .zip(w)
        .map(|(si, wi)| -wi + 2.0 * lambda_reg / n * si)
        .collect())
}

/// Result of evaluating the listwise loss on one group.
#[derive(Debug, Clone)]
pub struct LairStep {
    pub loss: f64,
    pub grads: Vec<f64>,
    pub rewards: ImplicitRewardBatch,
    pub weights: AdvantageWeights,
}

/// Listwise loss and parameter gradient for one group at a shared `t`, with
/// the group's condition optionally replaced (prompt dropout).
pub(crate) fn lair_group_step(
    model: &DenoiserModel,
    reference: &DenoiserModel,
    group: &CandidateGroup,
    cond: &[f64],
    t: usize,
    eps_list: &[Vec<f64>],
    sched: &NoiseSchedule,
    cfg: &LairConfig,
) -> Result<LairStep> {
    if group.len() < 2 {
        return Err(LairError::GroupSize(group.len()));
    }
    let weights = advantage_weights(&group.rewards(), cfg.tau)?;
    let fwd = group_forward(model, reference, &group.x0s(), cond, t, eps_list, sched)?;
    let s: Vec<f64> = fwd.samples.iter().map(|x| x.s).collect();
    let loss = lair_loss_in_s(&s, &weights.w, cfg.lambda_reg)?;
    let ds = lair_grad_in_s(&s, &weights.w, cfg.lambda_reg)?;
    // s_i = omega (l_ref - ||eps_theta - eps||^2)  =>  ds_i/d eps_theta = -2 omega (eps_theta - eps)
    let omega = sched.omega(t);
    let mut d_out: Array2<f64> = fwd.policy_residual.clone();
    for (mut row, g) in d_out.rows_mut().into_iter().zip(&ds) {
        row.mapv_inplace(|r| -2.0 * omega * r * g);
    }
    let grads = model.backward(&fwd.cache, d_out.view());
    Ok(LairStep {
        loss,
        grads,
        rewards: ImplicitRewardBatch {
            prompt_id: group.prompt_id.clone(),
            t,
            samples: fwd.samples,
        },
        weights,
    })
}

/// Sampled listwise loss of one group; the reference contributes no gradient.
pub fn lair_training_loss(
    model: &DenoiserModel,
    reference: &DenoiserModel,
    group: &CandidateGroup,
    t: usize,
    eps_list: &[Vec<f64>],
    sched: &NoiseSchedule,
    cfg: &LairConfig,
) -> Result<LairStep> {
    lair_group_step(model, reference, group, &group.c, t, eps_list, sched, cfg)
}

/// Numerically stable `-log sigmoid(z) = softplus(-z)`.
pub fn neg_log_sigmoid(z: f64) -> f64 {
    (-z).max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-log sigmoid(beta (s_w - s_l))`.
pub fn dpo_pair_loss(s_w: f64, s_l: f64, beta: f64) -> f64 {
    neg_log_sigmoid(beta * (s_w - s_l))
}

/// Gradient of [`dpo_pair_loss`] with respect to `(s_w, s_l)`.
pub fn dpo_pair_grad(s_w: f64, s_l: f64, beta: f64) -> (f64, f64) {
    let g = -beta * sigmoid(-beta * (s_w - s_l));
    (g, -g)
}

#[derive(Debug, Clone)]
pub struct DpoStep {
    pub loss: f64,
    pub grads: Vec<f64>,
    pub s_w: f64,
    pub s_l: f64,
}

/// Sampled Diffusion-DPO loss for one pair at a shared `t`.
pub fn dpo_training_loss(
    model: &DenoiserModel,
    reference: &DenoiserModel,
    pair: &PairRecord,
    t: usize,
    eps_w: &[f64],
    eps_l: &[f64],
    sched: &NoiseSchedule,
    beta: f64,
) -> Result<DpoStep> {
    if !(beta > 0.0) {
        return Err(LairError::Config(format!(
            "beta must be positive, got {beta}"
        )));
    }
    let (x_w, x_l) = pair.ordered();
    let fwd = group_forward(
        model,
        reference,
        &[x_w, x_l],
        &pair.c,
        t,
        &[eps_w.to_vec(), eps_l.to_vec()],
        sched,
    )?;
    let (s_w, s_l) = (fwd.samples[0].s, fwd.samples[1].s);
    let loss = dpo_pair_loss(s_w, s_l, beta);
    let (g_w, g_l) = dpo_pair_grad(s_w, s_l, beta);
    let omega = sched.omega(t);
    let mut d_out = fwd.policy_residual.clone();
    for (mut row, g) in d_out.rows_mut().into_iter().zip([g_w, g_l]) {
        row.mapv_inplace(|r| -2.0 * omega * r * g);
    }
    let grads = model.backward(&fwd.cache, d_out.view());
    Ok(DpoStep {
        loss,
        grads,
        s_w,
        s_l,
    })
}

/// Every scalar loss the crate can differentiate with respect to model parameters.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    /// Standard denoising loss over a batch of draws.
    Denoising {
        batch: &'a [DenoisingExample],
        sched: &'a NoiseSchedule,
    },
    Lair {
        reference: &'a DenoiserModel,
        group: &'a CandidateGroup,
        t: usize,
        eps: &'a [Vec<f64>],
        sched: &'a NoiseSchedule,
        cfg: &'a LairConfig,
    },
    Dpo {
        reference: &'a DenoiserModel,
        pair: &'a PairRecord,
        t: usize,
        eps_w: &'a [f64],
        eps_l: &'a [f64],
        sched: &'a NoiseSchedule,
        beta: f64,
    },
}

/// Loss value and exact reverse-mode gradient with respect to `model`'s parameters.
pub fn loss_grad(model: &DenoiserModel, objective: &Objective<'_>) -> Result<(f64, Vec<f64>)> {
    match *objective {
        Objective::Denoising { batch, sched } => denoising_loss_grad(model, batch, sched),
        Objective::Lair {
            reference,
            group,
            t,
            eps,
            sched,
            cfg,
        } => lair_training_loss(model, reference, group, t, eps, sched, cfg)
            .map(|s| (s.loss, s.grads)),
        Objective::Dpo {
            reference,
            pair,
            t,
            eps_w,
            eps_l,
            sched,
            beta,
        } => dpo_training_loss(model, reference, pair, t, eps_w, eps_l, sched, beta)
            .map(|s| (s.loss, s.grads)),
    }
}
