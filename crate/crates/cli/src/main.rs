//! `lair`: data generation, pretraining, listwise fine-tuning, evaluation,
//! ablation and theory checks for the toy alignment workflow.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lair_core::LairError;
use thiserror::Error;

use commands::{
    AblateSettings, EvalSettings, GenDataSettings, PretrainSettings, TrainSettings, VerifySettings,
};
use manifest::load_config;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Check(String),
    #[error(transparent)]
    Core(#[from] LairError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(LairError::Config(_)) => 2,
            CliError::Core(
                LairError::Io { .. }
                | LairError::Parse { .. }
                | LairError::Schema { .. }
                | LairError::Version { .. },
            ) => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "lair",
    version,
    about = "Listwise reward-aware fine-tuning of a toy diffusion model"
)]
struct Cli {
    /// Root seed; every random stream derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel sections (0 = all cores). Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// JSON settings file or run manifest; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the toy corpus: pretraining points, pairs, groups, held-out sets.
    GenData(GenDataArgs),
    /// Train the base denoiser.
    Pretrain(PretrainArgs),
    /// Fine-tune a base checkpoint with the listwise objective.
    Train(TrainArgs),
    /// Compare a tuned model with its base under shared sampling seeds.
    Eval(EvalArgs),
    /// Fine-tune and evaluate over a grid of list sizes and temperatures.
    Ablate(AblateArgs),
    /// Run the closed-form optimum, range, KL-bound and unboundedness checks.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    prompts: Option<usize>,
    #[arg(long)]
    pretrain_per_prompt: Option<usize>,
    /// Largest candidate list kept per prompt.
    #[arg(long)]
    max_list: Option<usize>,
    /// Number of held-out prompts.
    #[arg(long)]
    heldout: Option<usize>,
    #[arg(long)]
    pair_tail_alpha: Option<f64>,
    #[arg(long)]
    max_pairs_per_prompt: Option<usize>,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    /// Directory written by `gen-data`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    cfg_dropout: Option<f64>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    /// Diffusion steps T.
    #[arg(long)]
    num_steps: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainKnobs {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long = "lr")]
    learning_rate: Option<f64>,
    #[arg(long = "lambda")]
    lambda_reg: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    max_list: Option<usize>,
    #[arg(long)]
    batch_groups: Option<usize>,
    #[arg(long)]
    grad_accum: Option<usize>,
    #[arg(long)]
    cfg_dropout: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Record wall-clock seconds in the metrics (makes them non-reproducible).
    #[arg(long)]
    record_time: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Candidate groups file.
    #[arg(long)]
    groups: Option<PathBuf>,
    /// Base checkpoint; also the frozen reference.
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    knobs: TrainKnobs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Held-out groups for the implicit-reward sign probe.
    #[arg(long)]
    groups: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Samples per prompt.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    probe_draws: Option<usize>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    groups: Option<PathBuf>,
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// `default` (N in {2,8,16,30} by tau in {0.05,0.5,1.0}) or `N,N,..:tau,tau,..`.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    samples: Option<usize>,
    #[command(flatten)]
    knobs: TrainKnobs,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Report path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Random cases per randomized suite.
    #[arg(long)]
    cases: Option<usize>,
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn apply_knobs(cfg: &mut lair_core::trainer::TrainConfig, k: TrainKnobs, seed: Option<u64>) {
    set(&mut cfg.seed, seed);
    set(&mut cfg.steps, k.steps);
    set(&mut cfg.learning_rate, k.learning_rate);
    set(&mut cfg.lambda_reg, k.lambda_reg);
    set(&mut cfg.tau, k.tau);
    set(&mut cfg.max_list_size, k.max_list);
    set(&mut cfg.batch_groups, k.batch_groups);
    set(&mut cfg.grad_accum, k.grad_accum);
    set(&mut cfg.cfg_dropout, k.cfg_dropout);
    set(&mut cfg.weight_decay, k.weight_decay);
    cfg.record_time |= k.record_time;
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = cli.config.as_deref();
    match cli.command {
        Command::GenData(a) => {
            let mut s: GenDataSettings = load_config(file, "gen-data")?;
            set(&mut s.seed, cli.seed);
            set(&mut s.out, a.out);
            set(&mut s.prompts, a.prompts);
            set(&mut s.pretrain_per_prompt, a.pretrain_per_prompt);
            set(&mut s.max_list, a.max_list);
            set(&mut s.heldout, a.heldout);
            set(&mut s.pair_tail_alpha, a.pair_tail_alpha);
            set(&mut s.max_pairs_per_prompt, a.max_pairs_per_prompt);
            commands::gen_data(&s)
        }
        Command::Pretrain(a) => {
            let mut s: PretrainSettings = load_config(file, "pretrain")?;
            set(&mut s.seed, cli.seed);
            set(&mut s.data, a.data);
            set(&mut s.out, a.out);
            set(&mut s.steps, a.steps);
            set(&mut s.batch_size, a.batch_size);
            set(&mut s.learning_rate, a.learning_rate);
            set(&mut s.cfg_dropout, a.cfg_dropout);
            set(&mut s.width, a.width);
            set(&mut s.depth, a.depth);
            set(&mut s.num_steps, a.num_steps);
            commands::pretrain(&s)
        }
        Command::Train(a) => {
            let mut s: TrainSettings = load_config(file, "train")?;
            set(&mut s.groups, a.groups);
            set(&mut s.base, a.base);
            set(&mut s.out, a.out);
            apply_knobs(&mut s.train, a.knobs, cli.seed);
            commands::train(&s)
        }
        Command::Eval(a) => {
            let mut s: EvalSettings = load_config(file, "eval")?;
            set(&mut s.seed, cli.seed);
            set(&mut s.model, a.model);
            set(&mut s.base, a.base);
            set(&mut s.prompts, a.prompts);
            if a.groups.is_some() {
                s.groups = a.groups;
            }
            set(&mut s.out, a.out);
            set(&mut s.samples, a.samples);
            set(&mut s.tau, a.tau);
            set(&mut s.probe_draws, a.probe_draws);
            commands::eval(&s)
        }
        Command::Ablate(a) => {
            let mut s: AblateSettings = load_config(file, "ablate")?;
            set(&mut s.groups, a.groups);
            set(&mut s.base, a.base);
            set(&mut s.prompts, a.prompts);
            set(&mut s.out, a.out);
            set(&mut s.grid, a.grid);
            set(&mut s.samples, a.samples);
            apply_knobs(&mut s.train, a.knobs, cli.seed);
            commands::ablate(&s)
        }
        Command::Verify(a) => {
            let mut s: VerifySettings = load_config(file, "verify")?;
            set(&mut s.seed, cli.seed);
            set(&mut s.out, a.out);
            set(&mut s.cases, a.cases);
            commands::verify(&s)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
