//! Central finite-difference audit of analytic parameter gradients.

use serde::{Deserialize, Serialize};

use crate::diffusion::DenoiserModel;
use crate::error::Result;
use crate::objectives::{loss_grad, Objective};

/// Gradients smaller than this in both the analytic and numeric estimate are
/// compared absolutely; central differences cannot resolve them relatively.
pub const GRAD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradAudit {
    pub coordinates: usize,
    /// Coordinates whose relative error is within the tolerance.
    pub within: usize,
    pub worst_rel_error: f64,
    pub median_rel_error: f64,
}

impl GradAudit {
    pub fn fraction_within(&self) -> f64 {
        self.within as f64 / self.coordinates as f64
    }
}

/// `|a - n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Compares `loss_grad` against `(L(p + h e_k) - L(p - h e_k)) / 2h` on every
/// parameter coordinate.
pub fn audit_gradient(
    model: &DenoiserModel,
    objective: &Objective<'_>,
    h: f64,
    tol: f64,
) -> Result<GradAudit> {
    let (_, analytic) = loss_grad(model, objective)?;
    let mut params = model.params().to_vec();
    let mut errors = Vec::with_capacity(params.len());
    for k in 0..params.len() {
        let keep = params[k];
        params[k] = keep + h;
        let up = loss_grad(
            &DenoiserModel::from_params(model.arch().clone(), params.clone())?,
            objective,
        )?
        .0;
        params[k] = keep - h;
        let down = loss_grad(
            &DenoiserModel::from_params(model.arch().clone(), params.clone())?,
            objective,
        )?
        .0;
        params[k] = keep;
        errors.push(relative_error(analytic[k], (up - down) / (2.0 * h)));
    }
    let within = errors.iter().filter(|e| **e <= tol).count();
    let worst = errors.iter().copied().fold(0.0, f64::max);
    let mut sorted = errors.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(GradAudit {
        coordinates: errors.len(),
        within,
        worst_rel_error: worst,
        median_rel_error: sorted[sorted.len() / 2],
    })
}
