use ndarray::Array2;

use super::model::DenoiserModel;
use super::schedule::{forward_noise, NoiseSchedule};
use crate::error::{LairError, Result};

/// One draw of the standard denoising objective.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoisingExample {
    pub x0: Vec<f64>,
    pub c: Vec<f64>,
    pub t: usize,
    pub eps: Vec<f64>,
}

fn assemble(
    model: &DenoiserModel,
    batch: &[DenoisingExample],
    sched: &NoiseSchedule,
) -> Result<(Array2<f64>, Vec<usize>, Array2<f64>, Array2<f64>)> {
    if batch.is_empty() {
        return Err(LairError::Config("empty denoising batch".into()));
    }
    let arch = model.arch();
    let (d, cd) = (arch.data_dim, arch.cond_dim);
    let n = batch.len();
    let mut xt = Array2::zeros((n, d));
    let mut cond = Array2::zeros((n, cd));
    let mut eps = Array2::zeros((n, d));
    let mut ts = Vec::with_capacity(n);
    for (r, ex) in batch.iter().enumerate() {
        if ex.x0.len() != d {
            return Err(LairError::shape("x0 dimension", d, ex.x0.len()));
        }
        if ex.c.len() != cd {
            return Err(LairError::shape("condition dimension", cd, ex.c.len()));
        }
        let noised = forward_noise(&ex.x0, ex.t, &ex.eps, sched)?;
        for k in 0..d {
            xt[[r, k]] = noised[k];
            eps[[r, k]] = ex.eps[k];
        }
        for k in 0..cd {
            cond[[r, k]] = ex.c[k];
        }
        ts.push(ex.t);
    }
    Ok((xt, ts, cond, eps))
}

/// Mean over the batch of `omega(lambda_t) * ||eps_theta(x_t, t, c) - eps||^2`.
pub fn denoising_loss(
    model: &DenoiserModel,
    batch: &[DenoisingExample],
    sched: &NoiseSchedule,
) -> Result<f64> {
    let (xt, ts, cond, eps) = assemble(model, batch, sched)?;
    let pred = model.predict_batch(xt.view(), &ts, cond.view())?;
    let total: f64 = pred
        .rows()
        .into_iter()
        .zip(eps.rows())
        .zip(&ts)
        .map(|((p, e), &t)| {
            sched.omega(t)
                * p.iter()
                    .zip(e.iter())
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
        })
        .sum();
    Ok(total / batch.len() as f64)
}

/// Loss and exact parameter gradient of [`denoising_loss`].
pub fn denoising_loss_grad(
    model: &DenoiserModel,
    batch: &[DenoisingExample],
    sched: &NoiseSchedule,
) -> Result<(f64, Vec<f64>)> {
    let (xt, ts, cond, eps) = assemble(model, batch, sched)?;
    let (pred, cache) = model.forward_batch(xt.view(), &ts, cond.view())?;
    let n = batch.len() as f64;
    let mut d_out = &pred - &eps;
    let mut total = 0.0;
    for (mut row, &t) in d_out.rows_mut().into_iter().zip(&ts) {
        let w = sched.omega(t);
        total += w * row.iter().map(|v| v * v).sum::<f64>();
        row.mapv_inplace(|v| 2.0 * w * v / n);
    }
    let grads = model.backward(&cache, d_out.view());
    Ok((total / n, grads))
}
