use ndarray::Array2;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use super::model::DenoiserModel;
use super::schedule::NoiseSchedule;
use crate::error::{LairError, Result};
use crate::rng::Rng;

/// Ancestral (DDPM) sampling of a single `x_0` conditioned on `c`.
pub fn sample(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    c: &[f64],
    seed: u64,
) -> Result<Vec<f64>> {
    let cond = Array2::from_shape_vec((1, c.len()), c.to_vec())
        .map_err(|_| LairError::shape("condition", model.arch().cond_dim, c.len()))?;
    let out = sample_batch(model, sched, &cond, &[seed])?;
    Ok(out.row(0).to_vec())
}

/// Samples one `x_0` per row of `cond`, each row driven by its own seed so a
/// row's trajectory does not depend on what else is in the batch.
pub fn sample_batch(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    cond: &Array2<f64>,
    seeds: &[u64],
) -> Result<Array2<f64>> {
    let rows = cond.nrows();
    if seeds.len() != rows {
        return Err(LairError::shape("sampling seeds", rows, seeds.len()));
    }
    let dim = model.arch().data_dim;
    let mut rngs: Vec<Rng> = seeds.iter().map(|&s| Rng::seed_from_u64(s)).collect();
    let mut x = Array2::zeros((rows, dim));
    for (r, rng) in rngs.iter_mut().enumerate() {
        for d in 0..dim {
            x[[r, d]] = StandardNormal.sample(rng);
        }
    }
    for t in (1..=sched.num_steps()).rev() {
        let ts = vec![t; rows];
        let eps_hat = model.predict_batch(x.view(), &ts, cond.view())?;
        let beta = sched.beta(t);
        let coef = beta / sched.sigma(t);
        let inv_sqrt_keep = 1.0 / (1.0 - beta).sqrt();
        let noise_std = if t > 1 {
            let prev = sched.sigma(t - 1).powi(2);
            (beta * prev / sched.sigma(t).powi(2)).sqrt()
        } else {
            0.0
        };
        for (r, rng) in rngs.iter_mut().enumerate() {
            for d in 0..dim {
                let mean = (x[[r, d]] - coef * eps_hat[[r, d]]) * inv_sqrt_keep;
                x[[r, d]] = if t > 1 {
                    let z: f64 = StandardNormal.sample(rng);
                    mean + noise_std * z
                } else {
                    mean
                };
            }
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(LairError::NonFinite("sampled x_0"));
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::model::Arch;
    use crate::diffusion::schedule::{make_schedule, ScheduleKind};
    use crate::rng::{stream_rng, Stream};

    #[test]
    fn same_seed_same_sample() {
        let mut rng = stream_rng(5, Stream::Init);
        let model = DenoiserModel::init(Arch::with_width(8), &mut rng).unwrap();
        let sched = make_schedule(20, ScheduleKind::LinearBeta, 1e-4, 0.02).unwrap();
        let c = [0.0, 1.0, 0.0, 0.0];
        let a = sample(&model, &sched, &c, 99).unwrap();
        let b = sample(&model, &sched, &c, 99).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, sample(&model, &sched, &c, 100).unwrap());
    }

    #[test]
    fn batch_rows_match_single_draws() {
        let mut rng = stream_rng(6, Stream::Init);
        let model = DenoiserModel::init(Arch::with_width(8), &mut rng).unwrap();
        let sched = make_schedule(10, ScheduleKind::Cosine, 0.0, 0.0).unwrap();
        let cond =
            Array2::from_shape_vec((2, 4), vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let batch = sample_batch(&model, &sched, &cond, &[1, 2]).unwrap();
        let single = sample(&model, &sched, &[0.0, 0.0, 1.0, 0.0], 2).unwrap();
        assert_eq!(batch.row(1).to_vec(), single);
    }

    #[test]
    fn single_step_schedule_runs() {
        let model = DenoiserModel::zeros(Arch::with_width(4)).unwrap();
        let sched = NoiseSchedule::from_betas(&[0.5]).unwrap();
        let x = sample(&model, &sched, &[0.0; 4], 1).unwrap();
        assert_eq!(x.len(), 2);
        assert!(x.iter().all(|v| v.is_finite()));
    }
}
