//! Softmax probabilities over a group's rewards and the advantage weights
//! obtained by centering them against the uniform baseline `1/N_c`.

use crate::error::{LairError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageWeights {
    pub p: Vec<f64>,
    pub w: Vec<f64>,
    pub tau: f64,
    pub rewards: Vec<f64>,
}

impl AdvantageWeights {
    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

/// `p_i = exp(r_i / tau) / sum_j exp(r_j / tau)`, computed after subtracting
/// the largest logit so it never overflows.
pub fn softmax_probs(rewards: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(LairError::Config(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    if rewards.len() < 2 {
        return Err(LairError::GroupSize(rewards.len()));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(LairError::NonFinite("rewards"));
    }
    let logits: Vec<f64> = rewards.iter().map(|r| r / tau).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `w_i = p_i - 1/N_c`.
pub fn center_weights(p: &[f64]) -> Vec<f64> {
    let baseline = 1.0 / p.len() as f64;
    p.iter().map(|pi| pi - baseline).collect()
}

pub fn advantage_weights(rewards: &[f64], tau: f64) -> Result<AdvantageWeights> {
    let p = softmax_probs(rewards, tau)?;
    let w = center_weights(&p);
    Ok(AdvantageWeights {
        p,
        w,
        tau,
        rewards: rewards.to_vec(),
    })
}
