use std::fs;
use std::path::{Path, PathBuf};

use lair_core::csv::{write_csv, Cell};
use lair_core::data::{
    aggregate_pairs_to_lists, gen_heldout_dataset, gen_toy_dataset, CandidateGroup, DataPoint,
    GenConfig, Prompt,
};
use lair_core::dataset_io::{load_records, manifest_for, save_records, DatasetRecord};
use lair_core::diffusion::{
    load_checkpoint, save_checkpoint, snapshot_reference, Arch, ScheduleConfig,
};
use lair_core::numfmt::{fmt_f64, to_json_pretty};
use lair_core::theory::{kl_suite, optimum_suite, range_suite, unboundedness_suite, SuiteReport};
use lair_core::trainer::{
    evaluate, heldout_examples, heldout_loss, init_model, pretrain_base, run_ablation, sign_probe,
    train_lair_with, write_ablation_csv, AblationGrid, PretrainConfig, SignProbe, TrainConfig,
};
use lair_core::LairError;
use serde::{Deserialize, Serialize};

use crate::manifest::{io_error, RunManifest};
use crate::CliError;

pub const MANIFEST_FILE: &str = "run_manifest.json";

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = to_json_pretty(value).map_err(|e| CliError::Usage(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| io_error(path, e))
}

fn write_set<T: DatasetRecord>(
    path: PathBuf,
    records: &[T],
    seed: u64,
    outputs: &mut Vec<PathBuf>,
) -> Result<(), CliError> {
    save_records(&path, &manifest_for(records, seed), records)?;
    outputs.push(path);
    Ok(())
}

fn read_set<T: DatasetRecord>(path: &Path) -> Result<Vec<T>, CliError> {
    Ok(load_records(path)?.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataSettings {
    pub out: PathBuf,
    pub seed: u64,
    pub prompts: usize,
    pub pretrain_per_prompt: usize,
    pub max_list: usize,
    pub heldout: usize,
    pub pair_tail_alpha: f64,
    pub max_pairs_per_prompt: usize,
}

impl Default for GenDataSettings {
    fn default() -> Self {
        let gen = GenConfig::default();
        GenDataSettings {
            out: PathBuf::from("data"),
            seed: 0,
            prompts: gen.prompts,
            pretrain_per_prompt: gen.pretrain_per_prompt,
            max_list: 30,
            heldout: 100,
            pair_tail_alpha: gen.pair_tail_alpha,
            max_pairs_per_prompt: gen.max_pairs_per_prompt,
        }
    }
}

pub fn gen_data(s: &GenDataSettings) -> Result<(), CliError> {
    if s.max_list < 2 {
        return Err(CliError::Usage(format!(
            "--max-list must be at least 2, got {}",
            s.max_list
        )));
    }
    if s.heldout == 0 {
        return Err(CliError::Usage("--heldout must be positive".into()));
    }
    let gen = GenConfig {
        prompts: s.prompts,
        pretrain_per_prompt: s.pretrain_per_prompt,
        pair_tail_alpha: s.pair_tail_alpha,
        max_pairs_per_prompt: s.max_pairs_per_prompt,
        ..GenConfig::default()
    };
    gen.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    ensure_dir(&s.out)?;
    let manifest_path = s.out.join(MANIFEST_FILE);
    let mut manifest = RunManifest::start("gen-data", s.seed, s, vec![])?;
    manifest.write(&manifest_path)?;

    let train = gen_toy_dataset(&gen, s.seed)?;
    let groups = aggregate_pairs_to_lists(&train.pairs, s.max_list, s.seed)?;
    let heldout = gen_heldout_dataset(&gen, s.heldout, s.seed)?;
    let heldout_groups = aggregate_pairs_to_lists(&heldout.pairs, s.max_list, s.seed)?;

    let mut outputs = Vec::new();
    write_set(
        s.out.join("pretrain.jsonl"),
        &train.pretrain,
        s.seed,
        &mut outputs,
    )?;
    write_set(
        s.out.join("pairs.jsonl"),
        &train.pairs,
        s.seed,
        &mut outputs,
    )?;
    write_set(s.out.join("groups.jsonl"), &groups, s.seed, &mut outputs)?;
    write_set(
        s.out.join("heldout_prompts.jsonl"),
        &heldout.prompts,
        s.seed,
        &mut outputs,
    )?;
    write_set(
        s.out.join("heldout_points.jsonl"),
        &heldout.pretrain,
        s.seed,
        &mut outputs,
    )?;
    write_set(
        s.out.join("heldout_groups.jsonl"),
        &heldout_groups,
        s.seed,
        &mut outputs,
    )?;
    println!(
        "gen-data: {} prompts, {} pairs, {} groups, {} held-out prompts",
        train.prompts.len(),
        train.pairs.len(),
        groups.len(),
        heldout.prompts.len()
    );
    manifest.finish(&manifest_path, outputs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSettings {
    pub data: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub cfg_dropout: f64,
    pub width: usize,
    pub depth: usize,
    pub num_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Noise draws per held-out point when measuring held-out loss.
    pub heldout_draws: usize,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        let p = PretrainConfig::default();
        PretrainSettings {
            data: PathBuf::from("data"),
            out: PathBuf::from("base"),
            seed: 0,
            steps: p.steps,
            batch_size: p.batch_size,
            learning_rate: p.learning_rate,
            cfg_dropout: p.cfg_dropout,
            width: 128,
            depth: 3,
            num_steps: 200,
            beta_min: 1e-4,
            beta_max: 0.02,
            heldout_draws: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub heldout_loss_init: f64,
    pub heldout_loss_final: f64,
    pub reduction: f64,
}

pub fn pretrain(s: &PretrainSettings) -> Result<(), CliError> {
    if s.width == 0 || s.depth == 0 || s.heldout_draws == 0 {
        return Err(CliError::Usage(
            "width, depth and held-out draws must be positive".into(),
        ));
    }
    let schedule = ScheduleConfig::linear(s.num_steps, s.beta_min, s.beta_max);
    let sched = schedule
        .build()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let cfg = PretrainConfig {
        arch: Arch {
            hidden: vec![s.width; s.depth],
            ..Arch::default()
        },
        steps: s.steps,
        batch_size: s.batch_size,
        learning_rate: s.learning_rate,
        cfg_dropout: s.cfg_dropout,
        seed: s.seed,
        ..PretrainConfig::default()
    };
    if !(0.0..1.0).contains(&cfg.cfg_dropout) {
        return Err(CliError::Usage("--cfg-dropout must lie in [0, 1)".into()));
    }
    let train_path = s.data.join("pretrain.jsonl");
    let heldout_path = s.data.join("heldout_points.jsonl");
    ensure_dir(&s.out)?;
    let manifest_path = s.out.join(MANIFEST_FILE);
    let mut manifest = RunManifest::start(
        "pretrain",
        s.seed,
        s,
        vec![train_path.clone(), heldout_path.clone()],
    )?;
    manifest.write(&manifest_path)?;

    let points: Vec<DataPoint> = read_set(&train_path)?;
    let heldout: Vec<DataPoint> = read_set(&heldout_path)?;
    let examples = heldout_examples(&heldout, &sched, s.heldout_draws, s.seed);
    let before = heldout_loss(&init_model(&cfg)?, &examples, &sched)?;
    let (model, report) = pretrain_base(&points, &sched, &cfg)?;
    let after = heldout_loss(&model, &examples, &sched)?;

    let ckpt = s.out.join("base.ckpt.json");
    save_checkpoint(&ckpt, &model, &schedule)?;
    let metrics = s.out.join("pretrain_metrics.csv");
    let rows: Vec<Vec<Cell>> = report
        .losses
        .iter()
        .enumerate()
        .map(|(i, l)| vec![Cell::Int(i as u64 + 1), Cell::Real(*l)])
        .collect();
    write_csv(&metrics, &["step", "loss"], &rows)?;
    let summary_path = s.out.join("pretrain_summary.json");
    let summary = PretrainSummary {
        heldout_loss_init: before,
        heldout_loss_final: after,
        reduction: 1.0 - after / before,
    };
    write_json(&summary_path, &summary)?;
    println!(
        "pretrain: held-out loss {} -> {} ({:.1}% lower)",
        fmt_f64(before),
        fmt_f64(after),
        100.0 * summary.reduction
    );
    manifest.finish(&manifest_path, vec![ckpt, metrics, summary_path])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub groups: PathBuf,
    pub base: PathBuf,
    pub out: PathBuf,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            groups: PathBuf::from("data/groups.jsonl"),
            base: PathBuf::from("base/base.ckpt.json"),
            out: PathBuf::from("tuned"),
            train: TrainConfig::default(),
        }
    }
}

const LAMBDA_NOTE: &str =
    "lambda_reg sets the optimum scale N/(2 lambda); values in [0.05, 1] keep implicit \
rewards O(1)-O(10) on the toy model, while 0.00025 makes them O(10^4)";

pub fn train(s: &TrainSettings) -> Result<(), CliError> {
    s.train
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    ensure_dir(&s.out)?;
    let ckpt_dir = s.out.join("checkpoints");
    ensure_dir(&ckpt_dir)?;
    let manifest_path = s.out.join(MANIFEST_FILE);
    let mut manifest = RunManifest::start(
        "train",
        s.train.seed,
        s,
        vec![s.groups.clone(), s.base.clone()],
    )?;
    manifest.notes.push(LAMBDA_NOTE.into());
    manifest.write(&manifest_path)?;

    let groups: Vec<CandidateGroup> = read_set(&s.groups)?;
    let (base, schedule) = load_checkpoint(&s.base)?;
    let sched = schedule.build()?;
    let mut outputs = Vec::new();
    let mut last_good: Option<PathBuf> = None;
    let result = train_lair_with(&base, &groups, &sched, &s.train, &mut |step, model| {
        let path = ckpt_dir.join(format!("step_{step:06}.json"));
        save_checkpoint(&path, model, &schedule)?;
        outputs.push(path.clone());
        last_good = Some(path);
        Ok(())
    });
    let (tuned, metrics) = match result {
        Ok(v) => v,
        Err(e @ LairError::Divergence { .. }) => {
            let at =
                last_good.map_or_else(|| s.base.display().to_string(), |p| p.display().to_string());
            return Err(CliError::Check(format!("{e}; last good checkpoint: {at}")));
        }
        Err(e) => return Err(e.into()),
    };
    let tuned_path = s.out.join("tuned.ckpt.json");
    save_checkpoint(&tuned_path, &tuned, &schedule)?;
    let metrics_path = s.out.join("metrics.csv");
    metrics.write_csv(&metrics_path)?;
    if let Some(last) = metrics.steps.last() {
        println!(
            "train: {} steps, final loss {}, mean s+ {}, mean s- {}",
            last.step,
            fmt_f64(last.loss),
            fmt_f64(last.mean_s_pos),
            fmt_f64(last.mean_s_neg)
        );
    }
    outputs.push(tuned_path);
    outputs.push(metrics_path);
    manifest.finish(&manifest_path, outputs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub model: PathBuf,
    pub base: PathBuf,
    pub prompts: PathBuf,
    /// Held-out groups for the weight/implicit-reward sign probe; skipped when absent.
    pub groups: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub samples: usize,
    pub tau: f64,
    pub probe_draws: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            model: PathBuf::from("tuned/tuned.ckpt.json"),
            base: PathBuf::from("base/base.ckpt.json"),
            prompts: PathBuf::from("data/heldout_prompts.jsonl"),
            groups: None,
            out: PathBuf::from("eval"),
            seed: 0,
            samples: 5,
            tau: TrainConfig::default().tau,
            probe_draws: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub prompts: usize,
    pub samples: usize,
    pub win_rate: f64,
    pub model_mean: f64,
    pub ref_mean: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank_correlation: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_s_pos: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_s_neg: Option<f64>,
}

pub fn eval(s: &EvalSettings) -> Result<(), CliError> {
    if s.samples == 0 || s.probe_draws == 0 {
        return Err(CliError::Usage(
            "--samples and --probe-draws must be at least 1".into(),
        ));
    }
    if !(s.tau > 0.0) {
        return Err(CliError::Usage("--tau must be positive".into()));
    }
    ensure_dir(&s.out)?;
    let manifest_path = s.out.join(MANIFEST_FILE);
    let mut inputs = vec![s.model.clone(), s.base.clone(), s.prompts.clone()];
    inputs.extend(s.groups.clone());
    let mut manifest = RunManifest::start("eval", s.seed, s, inputs)?;
    manifest.write(&manifest_path)?;

    let (model, schedule) = load_checkpoint(&s.model)?;
    let (base, _) = load_checkpoint(&s.base)?;
    let sched = schedule.build()?;
    let reference = snapshot_reference(&base);
    let prompts: Vec<Prompt> = read_set(&s.prompts)?;
    let report = evaluate(&model, &reference, &prompts, &sched, s.samples, s.seed)?;
    let probe: Option<SignProbe> = match &s.groups {
        Some(path) => {
            let groups: Vec<CandidateGroup> = read_set(path)?;
            Some(sign_probe(
                &model,
                &reference,
                &groups,
                &sched,
                s.tau,
                s.probe_draws,
                s.seed,
            )?)
        }
        None => None,
    };
    let csv_path = s.out.join("eval.csv");
    report.write_csv(&csv_path)?;
    let summary = EvalSummary {
        prompts: report.rows.len(),
        samples: s.samples,
        win_rate: report.win_rate,
        model_mean: report.model_mean,
        ref_mean: report.ref_mean,
        rank_correlation: probe.as_ref().map(|p| p.rank_correlation),
        mean_s_pos: probe.as_ref().map(|p| p.mean_s_pos),
        mean_s_neg: probe.as_ref().map(|p| p.mean_s_neg),
    };
    let summary_path = s.out.join("eval_summary.json");
    write_json(&summary_path, &summary)?;
    println!(
        "eval: win rate {} over {} prompts, mean reward {} vs reference {}",
        fmt_f64(report.win_rate),
        report.rows.len(),
        fmt_f64(report.model_mean),
        fmt_f64(report.ref_mean)
    );
    if let Some(rho) = summary.rank_correlation {
        println!(
            "eval: rank correlation of weights and implicit rewards {}",
            fmt_f64(rho)
        );
    }
    manifest.finish(&manifest_path, vec![csv_path, summary_path])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblateSettings {
    pub groups: PathBuf,
    pub base: PathBuf,
    pub prompts: PathBuf,
    pub out: PathBuf,
    /// `default`, or `N,N,..:tau,tau,..`.
    pub grid: String,
    pub samples: usize,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl Default for AblateSettings {
    fn default() -> Self {
        AblateSettings {
            groups: PathBuf::from("data/groups.jsonl"),
            base: PathBuf::from("base/base.ckpt.json"),
            prompts: PathBuf::from("data/heldout_prompts.jsonl"),
            out: PathBuf::from("ablation"),
            grid: "default".into(),
            samples: 5,
            train: TrainConfig {
                steps: 500,
                ..TrainConfig::default()
            },
        }
    }
}

pub fn parse_grid(spec: &str) -> Result<AblationGrid, CliError> {
    if spec == "default" {
        return Ok(AblationGrid::default());
    }
    let bad = || {
        CliError::Usage(format!(
            "grid must be `default` or `N,N,..:tau,tau,..`, got `{spec}`"
        ))
    };
    let (ns, taus) = spec.split_once(':').ok_or_else(bad)?;
    let list_sizes = ns
        .split(',')
        .map(|v| v.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| bad())?;
    let taus = taus
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| bad())?;
    if list_sizes.iter().any(|&n| n < 2) || taus.iter().any(|t| !(*t > 0.0)) {
        return Err(bad());
    }
    Ok(AblationGrid { list_sizes, taus })
}

pub fn ablate(s: &AblateSettings) -> Result<(), CliError> {
    let grid = parse_grid(&s.grid)?;
    if s.samples == 0 {
        return Err(CliError::Usage("--samples must be at least 1".into()));
    }
    s.train
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    ensure_dir(&s.out)?;
    let manifest_path = s.out.join(MANIFEST_FILE);
    let inputs = vec![s.groups.clone(), s.base.clone(), s.prompts.clone()];
    let mut manifest = RunManifest::start("ablate", s.train.seed, s, inputs)?;
    manifest.notes.push(LAMBDA_NOTE.into());
    manifest.write(&manifest_path)?;

    let groups: Vec<CandidateGroup> = read_set(&s.groups)?;
    let (base, schedule) = load_checkpoint(&s.base)?;
    let sched = schedule.build()?;
    let prompts: Vec<Prompt> = read_set(&s.prompts)?;
    let widest = grid.list_sizes.iter().copied().max().unwrap_or(2);
    let cfg = TrainConfig {
        max_list_size: s.train.max_list_size.max(widest),
        ..s.train.clone()
    };
    let rows = run_ablation(
        &base,
        &groups,
        &sched,
        &grid,
        &cfg,
        &prompts,
        s.samples,
        s.train.seed,
    )?;
    let csv_path = s.out.join("ablation.csv");
    write_ablation_csv(&csv_path, &rows)?;
    for r in &rows {
        println!(
            "ablate: N={:<3} tau={:<5} win rate {}",
            r.max_list_size,
            r.tau,
            fmt_f64(r.win_rate)
        );
    }
    manifest.finish(&manifest_path, vec![csv_path])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySettings {
    pub out: PathBuf,
    pub seed: u64,
    pub cases: usize,
}

impl Default for VerifySettings {
    fn default() -> Self {
        VerifySettings {
            out: PathBuf::from("verify_report.json"),
            seed: 0,
            cases: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub cases: usize,
    pub passed: bool,
    pub suites: Vec<SuiteReport>,
}

pub fn verify(s: &VerifySettings) -> Result<(), CliError> {
    if s.cases == 0 {
        return Err(CliError::Usage("--cases must be at least 1".into()));
    }
    let suites = vec![
        optimum_suite(s.cases, s.seed)?,
        range_suite(s.cases, s.seed)?,
        kl_suite(s.cases, s.seed)?,
        unboundedness_suite()?.0,
    ];
    let report = VerifyReport {
        seed: s.seed,
        cases: s.cases,
        passed: suites.iter().all(|r| r.passed),
        suites,
    };
    if let Some(dir) = s.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write_json(&s.out, &report)?;
    for r in &report.suites {
        println!(
            "verify: {:<24} {} ({} cases, {} {})",
            r.name,
            if r.passed { "pass" } else { "FAIL" },
            r.cases,
            r.metric,
            fmt_f64(r.worst)
        );
    }
    if report.passed {
        Ok(())
    } else {
        let failed: Vec<String> = report
            .suites
            .iter()
            .filter(|r| !r.passed)
            .map(|r| {
                format!(
                    "{} ({} failures, {} {})",
                    r.name,
                    r.failures,
                    r.metric,
                    fmt_f64(r.worst)
                )
            })
            .collect();
        Err(CliError::Check(failed.join("; ")))
    }
}
