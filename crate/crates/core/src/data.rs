//! Toy preference data: an analytic reward over 2-D samples, a synthetic
//! pairwise preference corpus, and aggregation of pairs into per-prompt
//! candidate lists.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LairError, Result};
use crate::rng::{child_rng, stream_rng, Rng, Stream};

pub const DATA_DIM: usize = 2;
pub const COND_DIM: usize = 4;
pub const REWARD_FN_ID: &str = "toy-mixture-v1";

/// Radius of the circle the four class modes sit on.
pub const MODE_RADIUS: f64 = 2.5;
/// Global point rewarded by the smooth "style" bonus.
pub const STYLE_ANCHOR: [f64; DATA_DIM] = [0.0, 0.0];
pub const STYLE_BONUS: f64 = 1.0;

/// A clean training sample and its condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataPoint {
    pub x0: Vec<f64>,
    pub c: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub prompt_id: String,
    pub c: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub x0: Vec<f64>,
    pub reward: f64,
}

/// All scored candidates of one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateGroup {
    pub prompt_id: String,
    pub c: Vec<f64>,
    pub candidates: Vec<Candidate>,
}

impl CandidateGroup {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.candidates.iter().map(|c| c.reward).collect()
    }

    pub fn x0s(&self) -> Vec<&[f64]> {
        self.candidates.iter().map(|c| c.x0.as_slice()).collect()
    }

    pub fn validate(&self, max_list_size: usize) -> Result<()> {
        if self.candidates.len() < 2 {
            return Err(LairError::GroupSize(self.candidates.len()));
        }
        if self.candidates.len() > max_list_size {
            return Err(LairError::Contract(format!(
                "group {} has {} candidates, above the limit {max_list_size}",
                self.prompt_id,
                self.candidates.len()
            )));
        }
        if self
            .candidates
            .iter()
            .any(|c| !c.reward.is_finite() || c.x0.iter().any(|v| !v.is_finite()))
        {
            return Err(LairError::NonFinite("candidate group"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preferred {
    A,
    B,
}

/// One pairwise comparison, shaped like a Pick-a-Pic entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub prompt_id: String,
    pub c: Vec<f64>,
    pub x_a: Vec<f64>,
    pub x_b: Vec<f64>,
    pub label: Option<Preferred>,
    pub r_a: f64,
    pub r_b: f64,
}

impl PairRecord {
    /// `(winner, loser)`; the label wins over rewards when present.
    pub fn ordered(&self) -> (&[f64], &[f64]) {
        let a_wins = match self.label {
            Some(Preferred::A) => true,
            Some(Preferred::B) => false,
            None => self.r_a >= self.r_b,
        };
        if a_wins {
            (&self.x_a, &self.x_b)
        } else {
            (&self.x_b, &self.x_a)
        }
    }
}

fn class_mode(class: usize) -> [f64; DATA_DIM] {
    let angle = class as f64 * std::f64::consts::FRAC_PI_2;
    [MODE_RADIUS * angle.cos(), MODE_RADIUS * angle.sin()]
}

/// Preferred location for condition `c`: the condition-weighted blend of the
/// class modes.
pub fn target(c: &[f64]) -> [f64; DATA_DIM] {
    let mut out = [0.0; DATA_DIM];
    for (j, cj) in c.iter().enumerate() {
        let m = class_mode(j);
        out[0] += cj * m[0];
        out[1] += cj * m[1];
    }
    out
}

/// Competing mode the base data also covers: the target rotated by 90 degrees.
pub fn decoy(c: &[f64]) -> [f64; DATA_DIM] {
    let t = target(c);
    [-t[1], t[0]]
}

/// `-||x0 - target(c)||^2 + STYLE_BONUS * exp(-||x0 - anchor||^2 / 2)`.
pub fn synthetic_reward(c: &[f64], x0: &[f64]) -> f64 {
    let tgt = target(c);
    let dist2: f64 = x0.iter().zip(tgt).map(|(x, t)| (x - t).powi(2)).sum();
    let anchor2: f64 = x0
        .iter()
        .zip(STYLE_ANCHOR)
        .map(|(x, a)| (x - a).powi(2))
        .sum();
    -dist2 + STYLE_BONUS * (-anchor2 / 2.0).exp()
}

/// One-hot class indicator with per-coordinate jitter.
pub fn prompt_condition(class: usize, rng: &mut Rng) -> Vec<f64> {
    (0..COND_DIM)
        .map(|j| {
            let base = if j == class % COND_DIM { 1.0 } else { 0.0 };
            base + rng.random_range(-0.15..0.15)
        })
        .collect()
}

/// The reserved all-zeros condition used for prompt dropout.
pub fn null_condition() -> Vec<f64> {
    vec![0.0; COND_DIM]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub prompts: usize,
    pub pretrain_per_prompt: usize,
    /// Shape of the Pareto law behind per-prompt pair counts.
    pub pair_tail_alpha: f64,
    pub max_pairs_per_prompt: usize,
    /// Probability a base sample comes from the target mode (else the decoy).
    pub target_fraction: f64,
    pub mode_std: f64,
    /// Spread of the broader proposal that produces compared images.
    pub proposal_std: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            prompts: 200,
            pretrain_per_prompt: 64,
            pair_tail_alpha: 1.2,
            max_pairs_per_prompt: 200,
            target_fraction: 0.5,
            mode_std: 0.25,
            proposal_std: 0.5,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prompts == 0 {
            return Err(LairError::Config("need at least one prompt".into()));
        }
        if self.max_pairs_per_prompt == 0 {
            return Err(LairError::Config(
                "max pairs per prompt must be positive".into(),
            ));
        }
        if !(self.pair_tail_alpha > 0.0) {
            return Err(LairError::Config(
                "pair tail exponent must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.target_fraction) {
            return Err(LairError::Config(
                "target fraction must lie in [0, 1]".into(),
            ));
        }
        if !(self.mode_std > 0.0 && self.proposal_std > 0.0) {
            return Err(LairError::Config("spreads must be positive".into()));
        }
        Ok(())
    }
}

/// `P(count <= k)` for the capped, floored Pareto pair-count law.
pub fn pair_count_cdf(k: usize, alpha: f64, cap: usize) -> f64 {
    if k == 0 {
        0.0
    } else if k >= cap {
        1.0
    } else {
        1.0 - ((k + 1) as f64).powf(-alpha)
    }
}

fn draw_pair_count(rng: &mut Rng, alpha: f64, cap: usize) -> usize {
    // inverse CDF of Pareto(1, alpha), u in (0, 1]
    let u: f64 = 1.0 - rng.random::<f64>();
    let x = u.powf(-1.0 / alpha);
    (x.floor() as usize).clamp(1, cap)
}

fn draw_near(rng: &mut Rng, centre: [f64; DATA_DIM], std: f64) -> Vec<f64> {
    centre
        .iter()
        .map(|m| {
            let z: f64 = StandardNormal.sample(rng);
            m + std * z
        })
        .collect()
}

fn draw_mixture(rng: &mut Rng, c: &[f64], cfg: &GenConfig, std: f64) -> Vec<f64> {
    let centre = if rng.random::<f64>() < cfg.target_fraction {
        target(c)
    } else {
        decoy(c)
    };
    draw_near(rng, centre, std)
}

pub fn prompt_id(index: usize) -> String {
    format!("p{index:05}")
}

/// Training prompts `p00000..`, deterministic in `seed`.
pub fn training_prompts(count: usize, seed: u64) -> Vec<Prompt> {
    let mut rng = stream_rng(seed, Stream::Data);
    (0..count)
        .map(|k| Prompt {
            prompt_id: prompt_id(k),
            c: prompt_condition(k, &mut rng),
        })
        .collect()
}

/// Prompts disjoint from the training ones (ids `h00000..`), for evaluation.
pub fn heldout_prompts(count: usize, seed: u64) -> Vec<Prompt> {
    let mut rng = child_rng(seed, Stream::Data, u64::MAX);
    (0..count)
        .map(|k| Prompt {
            prompt_id: format!("h{k:05}"),
            c: prompt_condition(k, &mut rng),
        })
        .collect()
}

/// Base-model training samples and pairwise preference records.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub prompts: Vec<Prompt>,
    pub pretrain: Vec<DataPoint>,
    pub pairs: Vec<PairRecord>,
}

/// Generates the toy corpus. Each prompt draws its own pair count from a
/// heavy-tailed law, so a few prompts own many comparisons.
pub fn gen_toy_dataset(cfg: &GenConfig, seed: u64) -> Result<ToyDataset> {
    cfg.validate()?;
    gen_for_prompts(cfg, training_prompts(cfg.prompts, seed), seed, 0)
}

/// Same generator over `count` held-out prompts, with its own random streams.
pub fn gen_heldout_dataset(cfg: &GenConfig, count: usize, seed: u64) -> Result<ToyDataset> {
    cfg.validate()?;
    gen_for_prompts(cfg, heldout_prompts(count, seed), seed, 1 << 40)
}

fn gen_for_prompts(
    cfg: &GenConfig,
    prompts: Vec<Prompt>,
    seed: u64,
    stream_offset: u64,
) -> Result<ToyDataset> {
    let mut pretrain = Vec::with_capacity(prompts.len() * cfg.pretrain_per_prompt);
    let mut pairs = Vec::new();
    for (k, prompt) in prompts.iter().enumerate() {
        let mut rng = child_rng(seed, Stream::Data, stream_offset + k as u64);
        for _ in 0..cfg.pretrain_per_prompt {
            pretrain.push(DataPoint {
                x0: draw_mixture(&mut rng, &prompt.c, cfg, cfg.mode_std),
                c: prompt.c.clone(),
            });
        }
        let count = draw_pair_count(&mut rng, cfg.pair_tail_alpha, cfg.max_pairs_per_prompt);
        // images are shared between comparisons, as in real preference logs
        let pool: Vec<Vec<f64>> = (0..count + 1)
            .map(|_| draw_mixture(&mut rng, &prompt.c, cfg, cfg.proposal_std))
            .collect();
        for _ in 0..count {
            let picked = index::sample(&mut rng, pool.len(), 2);
            let (x_a, x_b) = (pool[picked.index(0)].clone(), pool[picked.index(1)].clone());
            let r_a = synthetic_reward(&prompt.c, &x_a);
            let r_b = synthetic_reward(&prompt.c, &x_b);
            let label = if r_a >= r_b {
                Preferred::A
            } else {
                Preferred::B
            };
            pairs.push(PairRecord {
                prompt_id: prompt.prompt_id.clone(),
                c: prompt.c.clone(),
                x_a,
                x_b,
                label: Some(label),
                r_a,
                r_b,
            });
        }
    }
    Ok(ToyDataset {
        prompts,
        pretrain,
        pairs,
    })
}

fn prompt_hash(prompt_id: &str) -> u64 {
    // FNV-1a
    prompt_id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn same_vector(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Keeps at most `max_list_size` candidates, chosen uniformly without
/// replacement by an RNG keyed on `seed` and the prompt id; survivors keep
/// their original order.
pub fn subsample_group(group: &CandidateGroup, max_list_size: usize, seed: u64) -> CandidateGroup {
    if group.candidates.len() <= max_list_size {
        return group.clone();
    }
    let mut rng = child_rng(seed, Stream::Aggregate, prompt_hash(&group.prompt_id));
    let mut keep = index::sample(&mut rng, group.candidates.len(), max_list_size).into_vec();
    keep.sort_unstable();
    CandidateGroup {
        prompt_id: group.prompt_id.clone(),
        c: group.c.clone(),
        candidates: keep
            .into_iter()
            .map(|i| group.candidates[i].clone())
            .collect(),
    }
}

/// Regroups pairwise records into one reward-labelled list per prompt.
///
/// Images are deduplicated by exact equality, lists longer than
/// `max_list_size` are subsampled, and prompts left with fewer than two
/// distinct images are dropped. Output is ordered by prompt id.
pub fn aggregate_pairs_to_lists(
    pairs: &[PairRecord],
    max_list_size: usize,
    seed: u64,
) -> Result<Vec<CandidateGroup>> {
    if max_list_size < 2 {
        return Err(LairError::Config(format!(
            "maximum list size must be at least 2, got {max_list_size}"
        )));
    }
    let mut by_prompt: BTreeMap<&str, CandidateGroup> = BTreeMap::new();
    for pair in pairs {
        let group = by_prompt
            .entry(&pair.prompt_id)
            .or_insert_with(|| CandidateGroup {
                prompt_id: pair.prompt_id.clone(),
                c: pair.c.clone(),
                candidates: Vec::new(),
            });
        for (x, r) in [(&pair.x_a, pair.r_a), (&pair.x_b, pair.r_b)] {
            if !group.candidates.iter().any(|c| same_vector(&c.x0, x)) {
                group.candidates.push(Candidate {
                    x0: x.clone(),
                    reward: r,
                });
            }
        }
    }
    Ok(by_prompt
        .into_values()
        .filter(|g| g.candidates.len() >= 2)
        .map(|g| subsample_group(&g, max_list_size, seed))
        .collect())
}

/// Applies [`subsample_group`] to every group.
pub fn truncate_groups(
    groups: &[CandidateGroup],
    max_list_size: usize,
    seed: u64,
) -> Vec<CandidateGroup> {
    groups
        .iter()
        .map(|g| subsample_group(g, max_list_size, seed))
        .collect()
}
