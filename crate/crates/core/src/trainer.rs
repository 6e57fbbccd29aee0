//! Base-model pretraining, listwise fine-tuning against a frozen reference,
//! paired-seed evaluation, and the group-size / temperature ablation.

use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::csv::{write_csv, Cell};
use crate::data::{
    null_condition, synthetic_reward, truncate_groups, CandidateGroup, DataPoint, Prompt,
};
use crate::diffusion::{
    denoising_loss, denoising_loss_grad, sample_batch, snapshot_reference, Arch, DenoiserModel,
    DenoisingExample, NoiseSchedule,
};
use crate::error::{LairError, Result};
use crate::implicit_reward::require_frozen;
use crate::objectives::{lair_group_step, LairConfig};
use crate::optim::{optimizer_step, AdamHyper, AdamState};
use crate::rng::{child_rng, gaussian_vec, stream_rng, Rng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub arch: Arch,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub cfg_dropout: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            arch: Arch::default(),
            steps: 5000,
            batch_size: 128,
            learning_rate: 1e-3,
            cfg_dropout: 0.1,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl PretrainConfig {
    fn adam(&self) -> AdamHyper {
        AdamHyper {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub lambda_reg: f64,
    pub tau: f64,
    pub max_list_size: usize,
    /// Groups per micro-batch.
    pub batch_groups: usize,
    /// Micro-batches accumulated per optimizer step.
    pub grad_accum: usize,
    pub cfg_dropout: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Record wall-clock seconds in the metrics; off keeps metrics reproducible.
    pub record_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            learning_rate: 1e-4,
            lambda_reg: 0.5,
            tau: 0.5,
            max_list_size: 30,
            batch_groups: 4,
            grad_accum: 4,
            cfg_dropout: 0.1,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            record_time: false,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn lair(&self) -> LairConfig {
        LairConfig {
            lambda_reg: self.lambda_reg,
            tau: self.tau,
            max_list_size: self.max_list_size,
            ..LairConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        self.lair().validate()?;
        if self.batch_groups == 0 || self.grad_accum == 0 {
            return Err(LairError::Config(
                "batch size and accumulation must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.cfg_dropout) {
            return Err(LairError::Config(format!(
                "prompt dropout must lie in [0, 1), got {}",
                self.cfg_dropout
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
}

/// Fixed noising draws for measuring held-out denoising loss.
pub fn heldout_examples(
    points: &[DataPoint],
    sched: &NoiseSchedule,
    draws_per_point: usize,
    seed: u64,
) -> Vec<DenoisingExample> {
    let mut rng = stream_rng(seed, Stream::Diagnostics);
    let mut out = Vec::with_capacity(points.len() * draws_per_point);
    for p in points {
        for _ in 0..draws_per_point {
            out.push(DenoisingExample {
                x0: p.x0.clone(),
                c: p.c.clone(),
                t: rng.random_range(1..=sched.num_steps()),
                eps: gaussian_vec(&mut rng, p.x0.len()),
            });
        }
    }
    out
}

/// Mean denoising loss over fixed held-out draws.
pub fn heldout_loss(
    model: &DenoiserModel,
    examples: &[DenoisingExample],
    sched: &NoiseSchedule,
) -> Result<f64> {
    denoising_loss(model, examples, sched)
}

/// Initial model for `cfg` (what zero steps of pretraining return).
pub fn init_model(cfg: &PretrainConfig) -> Result<DenoiserModel> {
    let mut rng = stream_rng(cfg.seed, Stream::Init);
    DenoiserModel::init(cfg.arch.clone(), &mut rng)
}

/// Trains a fresh denoiser with the standard noise-prediction loss.
pub fn pretrain_base(
    data: &[DataPoint],
    sched: &NoiseSchedule,
    cfg: &PretrainConfig,
) -> Result<(DenoiserModel, PretrainReport)> {
    if data.is_empty() {
        return Err(LairError::Config("pretraining set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(LairError::Config("batch size must be positive".into()));
    }
    let adam = cfg.adam();
    adam.validate()?;
    let mut model = init_model(cfg)?;
    let mut state = AdamState::new(model.params().len());
    let mut rng = stream_rng(cfg.seed, Stream::Pretrain);
    let null = null_condition();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<DenoisingExample> = (0..cfg.batch_size)
            .map(|_| {
                let p = &data[rng.random_range(0..data.len())];
                let t = rng.random_range(1..=sched.num_steps());
                let eps = gaussian_vec(&mut rng, p.x0.len());
                let dropped = rng.random::<f64>() < cfg.cfg_dropout;
                DenoisingExample {
                    x0: p.x0.clone(),
                    c: if dropped { null.clone() } else { p.c.clone() },
                    t,
                    eps,
                }
            })
            .collect();
        let (loss, grads) = denoising_loss_grad(&model, &batch, sched)?;
        if !loss.is_finite() {
            return Err(LairError::Divergence {
                step,
                message: format!("pretraining loss became {loss}"),
            });
        }
        optimizer_step(model.params_mut()?, &grads, &mut state, &adam)?;
        losses.push(loss);
    }
    Ok((model, PretrainReport { losses }))
}

/// Randomness consumed by one group in one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupDraw {
    pub group: usize,
    pub t: usize,
    pub eps: Vec<Vec<f64>>,
    pub dropped: bool,
}

/// Draws `count` groups with a shared timestep each and fresh noise per candidate.
pub fn draw_groups(
    rng: &mut Rng,
    groups: &[CandidateGroup],
    sched: &NoiseSchedule,
    count: usize,
    cfg_dropout: f64,
) -> Vec<GroupDraw> {
    (0..count)
        .map(|_| {
            let group = rng.random_range(0..groups.len());
            let t = rng.random_range(1..=sched.num_steps());
            let dim = groups[group].candidates[0].x0.len();
            let eps = (0..groups[group].len())
                .map(|_| gaussian_vec(rng, dim))
                .collect();
            let dropped = rng.random::<f64>() < cfg_dropout;
            GroupDraw {
                group,
                t,
                eps,
                dropped,
            }
        })
        .collect()
}

/// Running sums over a set of group evaluations.
#[derive(Debug, Clone, PartialEq)]
pub struct Accumulated {
    pub loss: f64,
    pub grads: Vec<f64>,
    pub pos_s: (f64, usize),
    pub neg_s: (f64, usize),
}

impl Accumulated {
    pub fn new(len: usize) -> Self {
        Accumulated {
            loss: 0.0,
            grads: vec![0.0; len],
            pos_s: (0.0, 0),
            neg_s: (0.0, 0),
        }
    }
}

/// Adds the listwise loss of each drawn group, scaled by `1 / denom`, into `acc`.
pub fn accumulate_groups(
    acc: &mut Accumulated,
    model: &DenoiserModel,
    reference: &DenoiserModel,
    groups: &[CandidateGroup],
    draws: &[GroupDraw],
    sched: &NoiseSchedule,
    cfg: &LairConfig,
    denom: usize,
) -> Result<()> {
    let null = null_condition();
    let scale = 1.0 / denom as f64;
    for d in draws {
        let group = &groups[d.group];
        let cond = if d.dropped { &null } else { &group.c };
        let step = lair_group_step(model, reference, group, cond, d.t, &d.eps, sched, cfg)?;
        acc.loss += scale * step.loss;
        acc.grads
            .iter_mut()
            .zip(&step.grads)
            .for_each(|(a, g)| *a += scale * g);
        for (sample, w) in step.rewards.samples.iter().zip(&step.weights.w) {
            if *w > 0.0 {
                acc.pos_s.0 += sample.s;
                acc.pos_s.1 += 1;
            } else if *w < 0.0 {
                acc.neg_s.0 += sample.s;
                acc.neg_s.1 += 1;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub mean_s_pos: f64,
    pub mean_s_neg: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub steps: Vec<StepMetrics>,
}

impl TrainMetrics {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let rows: Vec<Vec<Cell>> = self
            .steps
            .iter()
            .map(|m| {
                vec![
                    Cell::Int(m.step as u64),
                    Cell::Real(m.loss),
                    Cell::Real(m.mean_s_pos),
                    Cell::Real(m.mean_s_neg),
                    Cell::Real(m.grad_norm),
                    Cell::Real(m.seconds),
                ]
            })
            .collect();
        write_csv(
            path,
            &[
                "step",
                "loss",
                "mean_s_pos",
                "mean_s_neg",
                "grad_norm",
                "seconds",
            ],
            &rows,
        )
    }
}

/// Steps at which a checkpoint is due: every 10% of the run and the last step.
pub fn checkpoint_steps(total: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (1..=10)
        .map(|k| (total * k) / 10)
        .filter(|&s| s > 0)
        .collect();
    out.dedup();
    out
}

/// Fine-tunes a copy of `base` with the listwise objective against a frozen
/// snapshot of `base`.
pub fn train_lair(
    base: &DenoiserModel,
    groups: &[CandidateGroup],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(DenoiserModel, TrainMetrics)> {
    train_lair_with(base, groups, sched, cfg, &mut |_, _| Ok(()))
}

/// [`train_lair`] that hands the model to `on_checkpoint` at every step in
/// [`checkpoint_steps`]. On divergence the error names the last step that was
/// checkpointed.
pub fn train_lair_with(
    base: &DenoiserModel,
    groups: &[CandidateGroup],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    on_checkpoint: &mut dyn FnMut(usize, &DenoiserModel) -> Result<()>,
) -> Result<(DenoiserModel, TrainMetrics)> {
    cfg.validate()?;
    if groups.is_empty() {
        return Err(LairError::Config("no candidate groups to train on".into()));
    }
    for g in groups {
        g.validate(cfg.max_list_size)?;
    }
    let reference = snapshot_reference(base);
    let ref_digest = reference.param_digest();
    let lair = cfg.lair();
    let adam = cfg.adam();
    let mut model = base.clone();
    let mut state = AdamState::new(model.params().len());
    let mut rng = stream_rng(cfg.seed, Stream::Train);
    let mut metrics = TrainMetrics::default();
    let due = checkpoint_steps(cfg.steps);
    let mut last_checkpoint = 0usize;
    let start = Instant::now();
    let per_step = cfg.batch_groups * cfg.grad_accum;
    for step in 0..cfg.steps {
        let mut acc = Accumulated::new(model.params().len());
        for _ in 0..cfg.grad_accum {
            let draws = draw_groups(&mut rng, groups, sched, cfg.batch_groups, cfg.cfg_dropout);
            accumulate_groups(
                &mut acc, &model, &reference, groups, &draws, sched, &lair, per_step,
            )?;
        }
        if !acc.loss.is_finite() {
            return Err(LairError::Divergence {
                step,
                message: format!(
                    "loss became {}; last checkpoint at step {last_checkpoint}",
                    acc.loss
                ),
            });
        }
        let grad_norm = acc.grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        optimizer_step(model.params_mut()?, &acc.grads, &mut state, &adam)?;
        let mean = |(sum, n): (f64, usize)| if n == 0 { 0.0 } else { sum / n as f64 };
        metrics.steps.push(StepMetrics {
            step: step + 1,
            loss: acc.loss,
            mean_s_pos: mean(acc.pos_s),
            mean_s_neg: mean(acc.neg_s),
            grad_norm,
            seconds: if cfg.record_time {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
        if due.contains(&(step + 1)) {
            on_checkpoint(step + 1, &model)?;
            last_checkpoint = step + 1;
        }
    }
    require_frozen(&reference)?;
    if reference.param_digest() != ref_digest {
        return Err(LairError::Contract(
            "reference parameters changed during training".into(),
        ));
    }
    Ok((model, metrics))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub prompt_id: String,
    pub model_mean: f64,
    pub ref_mean: f64,
    /// 1 if the model's mean reward is higher, 0 if lower, 0.5 on a tie.
    pub win: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub model_mean: f64,
    pub ref_mean: f64,
    pub win_rate: f64,
    pub n_samples: usize,
}

impl EvalReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let rows: Vec<Vec<Cell>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    Cell::Text(r.prompt_id.clone()),
                    Cell::Real(r.model_mean),
                    Cell::Real(r.ref_mean),
                    Cell::Real(r.win),
                ]
            })
            .collect();
        write_csv(path, &["prompt_id", "model_mean", "ref_mean", "win"], &rows)
    }
}

/// Sampling seed of draw `j` for prompt `k`; shared by every model evaluated
/// with the same root seed.
pub fn sample_seed(seed: u64, prompt_index: usize, draw: usize) -> u64 {
    use rand::RngCore;
    child_rng(
        seed,
        Stream::Eval,
        (prompt_index as u64) << 16 | draw as u64,
    )
    .next_u64()
}

/// Synthetic rewards of `n_samples` draws per prompt, one row per prompt.
pub fn sample_rewards(
    model: &DenoiserModel,
    prompts: &[Prompt],
    sched: &NoiseSchedule,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    const CHUNK: usize = 8;
    let chunks: Vec<Result<Vec<Vec<f64>>>> = prompts
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let rows = chunk.len() * n_samples;
            let cond_dim = model.arch().cond_dim;
            let mut cond = Array2::zeros((rows, cond_dim));
            let mut seeds = Vec::with_capacity(rows);
            for (pi, p) in chunk.iter().enumerate() {
                if p.c.len() != cond_dim {
                    return Err(LairError::shape("prompt condition", cond_dim, p.c.len()));
                }
                for j in 0..n_samples {
                    let r = pi * n_samples + j;
                    cond.row_mut(r)
                        .iter_mut()
                        .zip(&p.c)
                        .for_each(|(v, c)| *v = *c);
                    seeds.push(sample_seed(seed, ci * CHUNK + pi, j));
                }
            }
            let xs = sample_batch(model, sched, &cond, &seeds)?;
            Ok(chunk
                .iter()
                .enumerate()
                .map(|(pi, p)| {
                    (0..n_samples)
                        .map(|j| {
                            synthetic_reward(
                                &p.c,
                                xs.row(pi * n_samples + j).as_slice().expect("row-major"),
                            )
                        })
                        .collect()
                })
                .collect())
        })
        .collect();
    let mut out = Vec::with_capacity(prompts.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Per-prompt mean synthetic reward of `model` and `reference` under shared
/// sampling seeds, and the fraction of prompts the model wins.
pub fn evaluate(
    model: &DenoiserModel,
    reference: &DenoiserModel,
    prompts: &[Prompt],
    sched: &NoiseSchedule,
    n_samples: usize,
    seed: u64,
) -> Result<EvalReport> {
    if n_samples == 0 {
        return Err(LairError::Config(
            "need at least one sample per prompt".into(),
        ));
    }
    if prompts.is_empty() {
        return Err(LairError::Config("no prompts to evaluate".into()));
    }
    let ours = sample_rewards(model, prompts, sched, n_samples, seed)?;
    let theirs = sample_rewards(reference, prompts, sched, n_samples, seed)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let rows: Vec<EvalRow> = prompts
        .iter()
        .zip(ours.iter().zip(&theirs))
        .map(|(p, (a, b))| {
            let (model_mean, ref_mean) = (mean(a), mean(b));
            let win = if model_mean > ref_mean {
                1.0
            } else if model_mean < ref_mean {
                0.0
            } else {
                0.5
            };
            EvalRow {
                prompt_id: p.prompt_id.clone(),
                model_mean,
                ref_mean,
                win,
            }
        })
        .collect();
    let n = rows.len() as f64;
    Ok(EvalReport {
        model_mean: rows.iter().map(|r| r.model_mean).sum::<f64>() / n,
        ref_mean: rows.iter().map(|r| r.ref_mean).sum::<f64>() / n,
        win_rate: rows.iter().map(|r| r.win).sum::<f64>() / n,
        rows,
        n_samples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub list_sizes: Vec<usize>,
    pub taus: Vec<f64>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        AblationGrid {
            list_sizes: vec![2, 8, 16, 30],
            taus: vec![0.05, 0.5, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub max_list_size: usize,
    pub tau: f64,
    pub model_mean: f64,
    pub ref_mean: f64,
    pub win_rate: f64,
    pub final_loss: f64,
}

/// Trains one model per `(N, tau)` cell from the same base and seed and
/// evaluates each against the base.
pub fn run_ablation(
    base: &DenoiserModel,
    groups: &[CandidateGroup],
    sched: &NoiseSchedule,
    grid: &AblationGrid,
    cfg: &TrainConfig,
    prompts: &[Prompt],
    n_samples: usize,
    eval_seed: u64,
) -> Result<Vec<AblationRow>> {
    if grid.list_sizes.is_empty() || grid.taus.is_empty() {
        return Err(LairError::Config("ablation grid is empty".into()));
    }
    let reference = snapshot_reference(base);
    let mut rows = Vec::new();
    for &n in &grid.list_sizes {
        let cell_groups = truncate_groups(groups, n, cfg.seed);
        for &tau in &grid.taus {
            let cell_cfg = TrainConfig {
                tau,
                max_list_size: n,
                ..cfg.clone()
            };
            let (tuned, metrics) = train_lair(base, &cell_groups, sched, &cell_cfg)?;
            let eval = evaluate(&tuned, &reference, prompts, sched, n_samples, eval_seed)?;
            rows.push(AblationRow {
                max_list_size: n,
                tau,
                model_mean: eval.model_mean,
                ref_mean: eval.ref_mean,
                win_rate: eval.win_rate,
                final_loss: metrics.steps.last().map_or(0.0, |m| m.loss),
            });
        }
    }
    Ok(rows)
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let cells: Vec<Vec<Cell>> = rows
        .iter()
        .map(|r| {
            vec![
                Cell::Int(r.max_list_size as u64),
                Cell::Real(r.tau),
                Cell::Real(r.model_mean),
                Cell::Real(r.ref_mean),
                Cell::Real(r.win_rate),
                Cell::Real(r.final_loss),
            ]
        })
        .collect();
    write_csv(
        path,
        &[
            "max_list_size",
            "tau",
            "model_mean",
            "ref_mean",
            "win_rate",
            "final_loss",
        ],
        &cells,
    )
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0;
        for &k in &order[i..=j] {
            out[k] = mid;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties; 0 when either side
/// is constant.
pub fn rank_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(LairError::shape("rank correlation", a.len(), b.len()));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va * vb).sqrt())
}

/// Advantage weights paired with Monte-Carlo implicit rewards on probe groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignProbe {
    pub weights: Vec<f64>,
    pub scores: Vec<f64>,
    pub rank_correlation: f64,
    pub mean_s_pos: f64,
    pub mean_s_neg: f64,
}

/// Measures `S_theta` for every candidate of `groups` with `draws` noise
/// draws each and correlates it with the candidates' advantage weights.
pub fn sign_probe(
    model: &DenoiserModel,
    reference: &DenoiserModel,
    groups: &[CandidateGroup],
    sched: &NoiseSchedule,
    tau: f64,
    draws: usize,
    seed: u64,
) -> Result<SignProbe> {
    let mut weights = Vec::new();
    let mut scores = Vec::new();
    for (gi, g) in groups.iter().enumerate() {
        let aw = crate::weights::advantage_weights(&g.rewards(), tau)?;
        for (ci, cand) in g.candidates.iter().enumerate() {
            let key = seed ^ ((gi as u64) << 32 | ci as u64);
            let s = crate::implicit_reward::implicit_reward_expectation(
                model, reference, &cand.x0, &g.c, sched, draws, key,
            )?;
            weights.push(aw.w[ci]);
            scores.push(s);
        }
    }
    let side = |pos: bool| {
        let picked: Vec<f64> = weights
            .iter()
            .zip(&scores)
            .filter(|(w, _)| if pos { **w > 0.0 } else { **w < 0.0 })
            .map(|(_, s)| *s)
            .collect();
        if picked.is_empty() {
            0.0
        } else {
            picked.iter().sum::<f64>() / picked.len() as f64
        }
    };
    Ok(SignProbe {
        rank_correlation: rank_correlation(&weights, &scores)?,
        mean_s_pos: side(true),
        mean_s_neg: side(false),
        weights,
        scores,
    })
}

/// `||a - b|| / ||b||`.
pub fn relative_drift(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{aggregate_pairs_to_lists, gen_toy_dataset, heldout_prompts, GenConfig};
    use crate::diffusion::ScheduleConfig;

    fn small_world() -> (NoiseSchedule, DenoiserModel, Vec<CandidateGroup>) {
        let sched = ScheduleConfig::linear(50, 1e-4, 0.05).build().unwrap();
        let gen = GenConfig {
            prompts: 12,
            pretrain_per_prompt: 16,
            ..GenConfig::default()
        };
        let ds = gen_toy_dataset(&gen, 3).unwrap();
        let groups = aggregate_pairs_to_lists(&ds.pairs, 8, 3).unwrap();
        let cfg = PretrainConfig {
            arch: Arch::with_width(16),
            steps: 50,
            batch_size: 32,
            ..PretrainConfig::default()
        };
        let (base, _) = pretrain_base(&ds.pretrain, &sched, &cfg).unwrap();
        (sched, base, groups)
    }

    fn quick_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_groups: 2,
            grad_accum: 2,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_steps_return_the_starting_point() {
        let (sched, base, groups) = small_world();
        let (tuned, metrics) = train_lair(&base, &groups, &sched, &quick_cfg(0)).unwrap();
        assert_eq!(tuned.params(), base.params());
        assert!(metrics.steps.is_empty());

        let ds = gen_toy_dataset(
            &GenConfig {
                prompts: 2,
                pretrain_per_prompt: 4,
                ..GenConfig::default()
            },
            1,
        )
        .unwrap();
        let cfg = PretrainConfig {
            steps: 0,
            arch: Arch::with_width(8),
            ..PretrainConfig::default()
        };
        let (model, report) = pretrain_base(&ds.pretrain, &sched, &cfg).unwrap();
        assert_eq!(model.params(), init_model(&cfg).unwrap().params());
        assert!(report.losses.is_empty());
        assert!(pretrain_base(&[], &sched, &cfg).is_err());
    }

    #[test]
    fn training_is_deterministic_and_leaves_base_alone() {
        let (sched, base, groups) = small_world();
        let digest = base.param_digest();
        let mut seen = Vec::new();
        let (a, ma) = train_lair_with(&base, &groups, &sched, &quick_cfg(20), &mut |s, _| {
            seen.push(s);
            Ok(())
        })
        .unwrap();
        let (b, mb) = train_lair(&base, &groups, &sched, &quick_cfg(20)).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(ma, mb);
        assert_eq!(seen, (1..=10).map(|k| 2 * k).collect::<Vec<_>>());
        assert_eq!(base.param_digest(), digest);
        assert!(ma
            .steps
            .iter()
            .all(|m| m.loss.is_finite() && m.grad_norm.is_finite() && m.seconds == 0.0));
    }

    #[test]
    fn checkpoint_cadence() {
        assert_eq!(checkpoint_steps(2000).len(), 10);
        assert_eq!(*checkpoint_steps(2000).last().unwrap(), 2000);
        assert_eq!(checkpoint_steps(3), vec![1, 2, 3]);
        assert!(checkpoint_steps(0).is_empty());
    }

    #[test]
    fn accumulation_matches_one_large_batch() {
        let (sched, base, groups) = small_world();
        let reference = snapshot_reference(&base);
        let lair = LairConfig {
            lambda_reg: 0.1,
            tau: 0.5,
            max_list_size: 8,
            ..LairConfig::default()
        };
        let mut rng = stream_rng(4, Stream::Train);
        let draws = draw_groups(&mut rng, &groups, &sched, 8, 0.1);
        let mut whole = Accumulated::new(base.params().len());
        accumulate_groups(
            &mut whole, &base, &reference, &groups, &draws, &sched, &lair, 8,
        )
        .unwrap();
        let mut parts = Accumulated::new(base.params().len());
        for chunk in draws.chunks(2) {
            accumulate_groups(
                &mut parts, &base, &reference, &groups, chunk, &sched, &lair, 8,
            )
            .unwrap();
        }
        let err = relative_drift(&parts.grads, &whole.grads);
        assert!(err <= 1e-10, "{err}");
        assert!((parts.loss - whole.loss).abs() <= 1e-10 * whole.loss.abs().max(1e-300));
    }

    #[test]
    fn rank_correlation_fixtures() {
        assert_eq!(
            rank_correlation(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(),
            1.0
        );
        assert_eq!(
            rank_correlation(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(),
            -1.0
        );
        assert_eq!(rank_correlation(&[1.0, 1.0], &[3.0, 2.0]).unwrap(), 0.0);
        assert_eq!(ranks(&[5.0, 1.0, 5.0, 0.0]), vec![2.5, 1.0, 2.5, 0.0]);
        assert!(rank_correlation(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn self_evaluation_is_an_exact_tie() {
        let (sched, base, _) = small_world();
        let prompts = heldout_prompts(6, 2);
        let reference = snapshot_reference(&base);
        let report = evaluate(&base, &reference, &prompts, &sched, 2, 9).unwrap();
        assert_eq!(report.win_rate, 0.5);
        assert!(report
            .rows
            .iter()
            .all(|r| r.model_mean == r.ref_mean && r.win == 0.5));
        assert!(evaluate(&base, &reference, &prompts, &sched, 0, 9).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let (sched, base, groups) = small_world();
        for cfg in [
            TrainConfig {
                cfg_dropout: 1.0,
                ..quick_cfg(1)
            },
            TrainConfig {
                batch_groups: 0,
                ..quick_cfg(1)
            },
            TrainConfig {
                tau: 0.0,
                ..quick_cfg(1)
            },
            TrainConfig {
                max_list_size: 2,
                ..quick_cfg(1)
            },
        ] {
            assert!(train_lair(&base, &groups, &sched, &cfg).is_err());
        }
        assert!(train_lair(&base, &[], &sched, &quick_cfg(1)).is_err());
    }
}
