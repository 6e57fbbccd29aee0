//! Adaptive-moment optimizer with bias correction and decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{LairError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(LairError::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(LairError::Config(
                "moment decay rates must lie in [0, 1)".into(),
            ));
        }
        if !(self.eps > 0.0 && self.weight_decay >= 0.0) {
            return Err(LairError::Config(
                "eps must be positive and weight decay non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One AdamW update of `params` in place.
pub fn optimizer_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(LairError::shape(
            "gradient length",
            params.len(),
            grads.len(),
        ));
    }
    if state.m.len() != params.len() {
        return Err(LairError::shape(
            "optimizer state length",
            params.len(),
            state.m.len(),
        ));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(LairError::NonFinite("gradient"));
    }
    state.step += 1;
    let t = state.step as i32;
    let correct1 = 1.0 - hyper.beta1.powi(t);
    let correct2 = 1.0 - hyper.beta2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
        *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
        let m_hat = *m / correct1;
        let v_hat = *v / correct2;
        *p -= hyper.learning_rate * (m_hat / (v_hat.sqrt() + hyper.eps) + hyper.weight_decay * *p);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![0.5, -1.0, 2.0];
        let mut st = AdamState::new(3);
        optimizer_step(&mut p, &[0.0; 3], &mut st, &AdamHyper::default()).unwrap();
        assert_eq!(p, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn first_step_is_normalized_gradient() {
        let hyper = AdamHyper {
            learning_rate: 0.01,
            ..AdamHyper::default()
        };
        let g = [0.3, -2.0, 1e-9];
        let mut p = vec![1.0, 1.0, 1.0];
        let mut st = AdamState::new(3);
        optimizer_step(&mut p, &g, &mut st, &hyper).unwrap();
        // bias-corrected moments equal g and g^2 after one step
        for i in 0..3 {
            let expected = 1.0 - 0.01 * g[i] / (g[i].abs() + 1e-8);
            assert!(
                (p[i] - expected).abs() < 1e-15,
                "{i}: {} vs {expected}",
                p[i]
            );
        }
    }

    #[test]
    fn second_step_hand_computed() {
        let hyper = AdamHyper {
            learning_rate: 0.1,
            ..AdamHyper::default()
        };
        let mut p = vec![0.0];
        let mut st = AdamState::new(1);
        optimizer_step(&mut p, &[1.0], &mut st, &hyper).unwrap();
        optimizer_step(&mut p, &[-1.0], &mut st, &hyper).unwrap();
        let m = 0.9 * 0.1 - 0.1;
        let v = 0.999 * 0.001 + 0.001;
        let step2 = (m / (1.0 - 0.81)) / ((v / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        let expected = -0.1 * (1.0 / (1.0 + 1e-8)) - 0.1 * step2;
        assert!((p[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn deterministic_trajectories_and_errors() {
        let run = || {
            let mut p = vec![0.1, 0.2];
            let mut st = AdamState::new(2);
            for k in 0..50 {
                let g = [(k as f64).sin(), (k as f64 * 0.3).cos()];
                optimizer_step(&mut p, &g, &mut st, &AdamHyper::default()).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
        let mut p = vec![0.0; 2];
        let mut st = AdamState::new(2);
        assert!(optimizer_step(&mut p, &[f64::NAN, 0.0], &mut st, &AdamHyper::default()).is_err());
        assert!(optimizer_step(&mut p, &[0.0], &mut st, &AdamHyper::default()).is_err());
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let hyper = AdamHyper {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..AdamHyper::default()
        };
        let mut p = vec![2.0];
        let mut st = AdamState::new(1);
        optimizer_step(&mut p, &[0.0], &mut st, &hyper).unwrap();
        assert!((p[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }
}
