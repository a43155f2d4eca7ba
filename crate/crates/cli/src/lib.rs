//! `ssmi` subcommands.
//!
//! Exit codes:
//!
//! | code | meaning                                   |
//! |------|-------------------------------------------|
//! | 0    | success                                   |
//! | 1    | I/O or other runtime error                |
//! | 2    | bad command line (usage)                  |
//! | 3    | config parse or validation error          |
//! | 4    | config/checkpoint incompatibility         |
//! | 5    | training divergence                       |
//! | 6    | malformed checkpoint or report file       |
//! | 7    | wrong training stage for the operation    |

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ssmi_core::checkpoint::{load_checkpoint, save_checkpoint, write_atomic, CheckpointMeta};
use ssmi_core::eval::{run_ablations, run_robustness, run_standard, run_zero_shot, EvalReport};
use ssmi_core::experiment::ExperimentConfig;
use ssmi_core::model::{FreezeMode, LvlmModel};
use ssmi_core::training::{run_stage1, run_stage2, Stage, TrainConfig};
use ssmi_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_COMPAT: i32 = 4;
pub const EXIT_DIVERGENCE: i32 = 5;
pub const EXIT_FORMAT: i32 = 6;
pub const EXIT_STAGE: i32 = 7;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::Compatibility { .. } => EXIT_COMPAT,
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        Error::Format { .. } => EXIT_FORMAT,
        Error::Stage(_) => EXIT_STAGE,
        _ => EXIT_OTHER,
    }
}

#[derive(Debug, Parser)]
#[command(name = "ssmi", version, about = "Two-stage state space memory training on a toy vision-language model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Stage 1: train the memory modules on reconstruction.
    Pretrain(PretrainArgs),
    /// Stage 2: continue from a pretrain checkpoint on the combined objective.
    Finetune(FinetuneArgs),
    /// Evaluate a checkpoint and write a report.
    Eval(EvalArgs),
    /// Same as `eval --mode ablate`.
    Ablate(AblateArgs),
    /// Pretty-print a report file.
    Report {
        path: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct StageOverrides {
    /// Replaces the stage's `steps`.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Replaces the stage's `lr`.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Replaces the stage's `seed`. Also seeds model initialisation in pretrain.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replaces the stage's `batch_size`.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Checkpoint output path (default: paths.checkpoint).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training log path (default: paths.log).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub overrides: StageOverrides,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Stage-1 checkpoint to start from.
    #[arg(long)]
    pub init: PathBuf,
    /// Replaces `train.finetune.lambda`.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[command(flatten)]
    pub overrides: StageOverrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Standard,
    Ablate,
    Robustness,
    ZeroShot,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint to evaluate. Not used by `ablate`, which trains its own models.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "standard")]
    pub mode: EvalMode,
    #[command(flatten)]
    pub common: EvalOverrides,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub common: EvalOverrides,
}

#[derive(Debug, Args)]
pub struct EvalOverrides {
    /// Report output path (default: paths.report).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Replaces `eval.seeds`.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Replaces `eval.sigmas`.
    #[arg(long, value_delimiter = ',')]
    pub sigmas: Option<Vec<f64>>,
}

/// Parses `args` (program name first), runs the command and returns its exit
/// code. Errors go to stderr, summaries to stdout.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(summary) => {
            print!("{summary}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> ssmi_core::Result<String> {
    match cli.command {
        Command::Pretrain(a) => pretrain(&a),
        Command::Finetune(a) => finetune(&a),
        Command::Eval(a) => eval(&a.config, a.checkpoint.as_deref(), a.mode, &a.common),
        Command::Ablate(a) => eval(&a.config, None, EvalMode::Ablate, &a.common),
        Command::Report { path } => {
            let text = std::fs::read_to_string(&path)?;
            Ok(pretty_report(&EvalReport::parse(&text)?))
        }
    }
}

fn apply(cfg: &mut TrainConfig, o: &StageOverrides, section: &str, log: &mut Vec<String>) {
    if let Some(v) = o.steps {
        cfg.steps = v;
        log.push(format!("train.{section}.steps={v}"));
    }
    if let Some(v) = o.lr {
        cfg.lr = v;
        log.push(format!("train.{section}.lr={v}"));
    }
    if let Some(v) = o.seed {
        cfg.seed = v;
        log.push(format!("train.{section}.seed={v}"));
    }
    if let Some(v) = o.batch_size {
        cfg.batch_size = v;
        log.push(format!("train.{section}.batch_size={v}"));
    }
}

fn write_text(path: &Path, text: &str) -> ssmi_core::Result<()> {
    write_atomic(path, text.as_bytes())
}

fn pretrain(a: &PretrainArgs) -> ssmi_core::Result<String> {
    let mut exp = ExperimentConfig::load(&a.config)?;
    let mut overrides = Vec::new();
    apply(&mut exp.train.pretrain, &a.overrides, "pretrain", &mut overrides);
    exp.validate()?;
    let cfg = &exp.train.pretrain;
    let dataset = exp.dataset()?;
    let mut model = LvlmModel::new(exp.model.clone(), cfg.seed)?;
    let log = run_stage1(&mut model, &dataset, cfg)?;
    let mut meta = CheckpointMeta::new(&exp.model, Stage::Pretrain, cfg.steps, cfg.seed);
    meta.overrides = overrides;
    let out = a.overrides.out.clone().unwrap_or_else(|| exp.paths.checkpoint.clone());
    let log_path = a.overrides.log.clone().unwrap_or_else(|| exp.paths.log.clone());
    save_checkpoint(&model, &meta, &out)?;
    write_text(&log_path, &log.to_text(cfg.log_every))?;
    let last = log.records.last().expect("at least one step");
    Ok(format!(
        "pretrain: {} steps, final reconstruction {}, checkpoint {}, log {}\n",
        cfg.steps,
        last.loss.pretrain_term,
        out.display(),
        log_path.display()
    ))
}

fn finetune(a: &FinetuneArgs) -> ssmi_core::Result<String> {
    let mut exp = ExperimentConfig::load(&a.config)?;
    let (init_meta, mut model) = load_checkpoint(&a.init)?;
    if init_meta.stage != Stage::Pretrain {
        return Err(Error::Stage(format!(
            "finetune needs a pretrain checkpoint, {} has stage {}",
            a.init.display(),
            init_meta.stage.name()
        )));
    }
    let differing = exp.model.diff(&init_meta.config);
    if !differing.is_empty() {
        return Err(Error::Compatibility { fields: differing });
    }
    let mut overrides = init_meta.overrides.clone();
    apply(&mut exp.train.finetune, &a.overrides, "finetune", &mut overrides);
    if let Some(l) = a.lambda {
        exp.train.finetune.lambda = l;
        overrides.push(format!("train.finetune.lambda={l}"));
    }
    exp.validate()?;
    let cfg = &exp.train.finetune;
    let dataset = exp.dataset()?;
    let log = run_stage2(&mut model, &dataset, cfg)?;
    let mut meta = CheckpointMeta::new(&exp.model, Stage::Finetune, cfg.steps, cfg.seed);
    meta.lambda = Some(cfg.lambda);
    meta.overrides = overrides;
    let out = a.overrides.out.clone().unwrap_or_else(|| exp.paths.checkpoint.clone());
    let log_path = a.overrides.log.clone().unwrap_or_else(|| exp.paths.log.clone());
    save_checkpoint(&model, &meta, &out)?;
    write_text(&log_path, &log.to_text(cfg.log_every))?;
    let last = log.records.last().expect("at least one step");
    Ok(format!(
        "finetune: {} steps, lambda {}, final total {}, checkpoint {}, log {}\n",
        cfg.steps,
        cfg.lambda,
        last.loss.total,
        out.display(),
        log_path.display()
    ))
}

fn eval(config: &Path, checkpoint: Option<&Path>, mode: EvalMode, o: &EvalOverrides) -> ssmi_core::Result<String> {
    let mut exp = ExperimentConfig::load(config)?;
    let mut overrides = Vec::new();
    if let Some(s) = &o.seeds {
        exp.eval.seeds = s.clone();
        overrides.push(("override.eval.seeds".to_string(), join(s)));
    }
    if let Some(s) = &o.sigmas {
        exp.eval.sigmas = s.clone();
        overrides.push(("override.eval.sigmas".to_string(), join(s)));
    }
    exp.validate()?;
    let dataset = exp.dataset()?;
    let loaded = || -> ssmi_core::Result<(CheckpointMeta, LvlmModel)> {
        let path = checkpoint.ok_or_else(|| Error::Config("this mode needs --checkpoint".into()))?;
        let (meta, model) = load_checkpoint(path)?;
        let differing = exp.model.diff(&meta.config);
        if !differing.is_empty() {
            return Err(Error::Compatibility { fields: differing });
        }
        Ok((meta, model))
    };
    let mut report = match mode {
        EvalMode::Standard => {
            let (meta, mut model) = loaded()?;
            if meta.stage == Stage::Pretrain {
                model.set_freeze_mode(FreezeMode::PretrainSsm);
            }
            run_standard(&model, &dataset, meta.stage.name())?
        }
        EvalMode::Robustness => {
            let (_, model) = loaded()?;
            run_robustness(&model, &dataset, &exp.eval.sigmas, &exp.eval.seeds)?
        }
        EvalMode::ZeroShot => {
            let (meta, mut model) = loaded()?;
            run_zero_shot(&mut model, &dataset, meta.stage)?
        }
        EvalMode::Ablate => run_ablations(&exp.plan(), &dataset, &exp.eval.seeds)?,
    };
    report.extras.extend(overrides);
    report.validate()?;
    let out = o.report.clone().unwrap_or_else(|| exp.paths.report.clone());
    write_text(&out, &report.to_text())?;
    Ok(format!("{}\nreport written to {}\n", pretty_report(&report), out.display()))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Human-readable rendering with aligned columns and percentages.
pub fn pretty_report(r: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{} report ({} checkpoint)", r.kind.name(), r.stage);
    let _ = writeln!(out, "  token accuracy   {:.4}", r.token_accuracy);
    let _ = writeln!(out, "  BLEU-4           {:.4}", r.bleu4);
    let _ = writeln!(
        out,
        "  trainable ratio  {:.4}% (target {:.1}%)",
        100.0 * r.trainable_ratio,
        100.0 * ssmi_core::eval::TARGET_TRAINABLE_RATIO
    );
    if !r.seeds.is_empty() {
        let _ = writeln!(out, "  seeds            {} (median)", join(&r.seeds));
    }
    for (k, v) in &r.extras {
        let _ = writeln!(out, "  {k:<16} {v}");
    }
    if !r.rows.is_empty() {
        let _ = writeln!(
            out,
            "\n  {:<18} {:>8} {:<13} {:>9} {:>8} {:>12} {:>9}",
            "ablation", "sigma", "freeze", "accuracy", "bleu4", "recon_mse", "delta"
        );
        for row in &r.rows {
            let _ = writeln!(
                out,
                "  {:<18} {:>8} {:<13} {:>9.4} {:>8.4} {:>12.6} {:>9.4}",
                row.ablation.name(),
                row.noise_sigma,
                row.freeze_mode.name(),
                row.token_accuracy,
                row.bleu4,
                row.reconstruction_mse,
                row.delta_accuracy
            );
        }
    }
    out
}
