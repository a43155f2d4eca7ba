//! Two-stage training of the memory modules.
//!
//! For a caption `x_0 … x_{T-1}` the model reads `x_0 … x_{T-2}`. Per sample:
//!
//! ```text
//! pretrain = (1/(T-1)) Σ_t ‖y_t − E[x_t]‖²          y = last memory output
//! task     = (1/(T-1)) Σ_t −log p_t(x_{t+1})
//! total    = λ · pretrain + (1 − λ) · task
//! ```
//!
//! where `E` is the frozen token embedding table. Batch losses are plain
//! means over samples.
//!
//! The text log has a `#`-prefixed header naming the tab-separated columns
//! `step pretrain_term task_term total wall_ms`. Floats use the shortest
//! representation that round-trips. `wall_ms` is the only
//! non-deterministic column.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{Batcher, Dataset, Split, SyntheticSample};
use crate::error::{Error, Result};
use crate::model::{FreezeMode, LvlmModel, ModelVars};
use crate::numerics::{clip_grad_norm, Adam, AdamConfig, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

fn default_lambda() -> f64 {
    0.5
}
fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    16
}
fn default_clip() -> f64 {
    1.0
}
fn default_log_every() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

impl TrainConfig {
    pub fn new(stage: Stage, steps: usize) -> Self {
        Self {
            stage,
            lambda: default_lambda(),
            lr: default_lr(),
            steps,
            batch_size: default_batch(),
            seed: 0,
            grad_clip: default_clip(),
            log_every: default_log_every(),
        }
    }

    /// Invariants for configs read from disk: `lr > 0` and `steps ≥ 1`.
    pub fn validate(&self) -> Result<()> {
        self.validate_run()?;
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("lr {} must be > 0", self.lr)));
        }
        Ok(())
    }

    /// Run-time checks. A zero learning rate is accepted here as a null
    /// update.
    pub fn validate_run(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be finite and >= 0", self.lr)));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config("batch_size and log_every must be at least 1".into()));
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return Err(Error::Config(format!("grad_clip {} must be > 0", self.grad_clip)));
        }
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::contract(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub pretrain_term: f64,
    pub task_term: f64,
    pub total: f64,
    pub step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    Pretrain,
    Task,
    Total(f64),
}

/// A recorded batch loss, ready for `backward`.
pub struct LossGraph {
    pub tape: Tape,
    pub vars: ModelVars,
    pub loss: Var,
    pub breakdown: LossBreakdown,
}

/// Splits a caption into model inputs and next-token targets.
pub fn shift(tokens: &[usize]) -> Result<(&[usize], &[usize])> {
    if tokens.len() < 2 {
        return Err(Error::contract("captions need at least 2 tokens"));
    }
    Ok((&tokens[..tokens.len() - 1], &tokens[1..]))
}

/// Records the loss of `batch` under `objective`.
pub fn build_loss(model: &LvlmModel, batch: &[&SyntheticSample], objective: Objective) -> Result<LossGraph> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    if let Objective::Total(l) = objective {
        check_lambda(l)?;
    }
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let mut rec_sum: Option<Var> = None;
    let mut task_sum: Option<Var> = None;
    for s in batch {
        let (inputs, targets) = shift(&s.tokens)?;
        let tr = model.trace(&mut tape, &vars, inputs, &s.raw_visual)?;
        let emb = tape.gather_rows(vars.token_embedding(), inputs)?;
        let rec = tape.mse(tr.memory, emb)?;
        let ce = tape.cross_entropy(tr.logits, targets)?;
        rec_sum = Some(match rec_sum {
            Some(acc) => tape.add(acc, rec)?,
            None => rec,
        });
        task_sum = Some(match task_sum {
            Some(acc) => tape.add(acc, ce)?,
            None => ce,
        });
    }
    let inv = 1.0 / batch.len() as f64;
    let rec = tape.scale(rec_sum.expect("nonempty"), inv)?;
    let task = tape.scale(task_sum.expect("nonempty"), inv)?;
    let loss = match objective {
        Objective::Pretrain => rec,
        Objective::Task => task,
        Objective::Total(l) => {
            let a = tape.scale(rec, l)?;
            let b = tape.scale(task, 1.0 - l)?;
            tape.add(a, b)?
        }
    };
    let breakdown = LossBreakdown {
        pretrain_term: tape.scalar(rec),
        task_term: tape.scalar(task),
        total: tape.scalar(loss),
        step: 0,
    };
    Ok(LossGraph { tape, vars, loss, breakdown })
}

pub fn pretrain_loss(model: &LvlmModel, batch: &[&SyntheticSample]) -> Result<(Tensor, LossBreakdown)> {
    let g = build_loss(model, batch, Objective::Pretrain)?;
    Ok((g.tape.value(g.loss), g.breakdown))
}

pub fn task_loss(model: &LvlmModel, batch: &[&SyntheticSample]) -> Result<(Tensor, LossBreakdown)> {
    let g = build_loss(model, batch, Objective::Task)?;
    Ok((g.tape.value(g.loss), g.breakdown))
}

pub fn total_loss(model: &LvlmModel, batch: &[&SyntheticSample], lambda: f64) -> Result<(Tensor, LossBreakdown)> {
    let g = build_loss(model, batch, Objective::Total(lambda))?;
    Ok((g.tape.value(g.loss), g.breakdown))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub loss: LossBreakdown,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLog {
    pub stage: Stage,
    /// One record per step, holding the loss of the batch before the update.
    pub records: Vec<LogRecord>,
    /// Steps at which a layer's `A` was rescaled: `(step, layer, rho)`.
    pub stability_events: Vec<(usize, usize, f64)>,
    /// Global gradient norm after clipping, per step.
    pub clipped_norms: Vec<f64>,
}

impl TrainingLog {
    pub fn losses(&self) -> Vec<LossBreakdown> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// Every `log_every`-th step plus the final step.
    pub fn to_text(&self, log_every: usize) -> String {
        let mut out = String::from("# step\tpretrain_term\ttask_term\ttotal\twall_ms\n");
        let last = self.records.len().saturating_sub(1);
        for (i, r) in self.records.iter().enumerate() {
            if i % log_every.max(1) == 0 || i == last {
                let l = r.loss;
                let _ = writeln!(out, "{}\t{}\t{}\t{}\t{:.3}", l.step, l.pretrain_term, l.task_term, l.total, r.wall_ms);
            }
        }
        out
    }
}

fn divergence(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(op) => Error::Divergence { step, reason: format!("non-finite value in {op}") },
        other => other,
    }
}

fn check_stage(config: &TrainConfig, want: Stage) -> Result<()> {
    if config.stage != want {
        return Err(Error::Stage(format!(
            "{} run given a {} config",
            want.name(),
            config.stage.name()
        )));
    }
    Ok(())
}

/// Stage 1: reconstruction pretraining of the memory modules only.
pub fn run_stage1(model: &mut LvlmModel, dataset: &Dataset, config: &TrainConfig) -> Result<TrainingLog> {
    check_stage(config, Stage::Pretrain)?;
    model.set_freeze_mode(FreezeMode::PretrainSsm);
    train_loop(model, dataset, config, Objective::Pretrain)
}

/// Stage 2: fine-tuning the memory modules on the combined objective.
pub fn run_stage2(model: &mut LvlmModel, dataset: &Dataset, config: &TrainConfig) -> Result<TrainingLog> {
    check_stage(config, Stage::Finetune)?;
    model.set_freeze_mode(FreezeMode::FinetuneSsm);
    train_loop(model, dataset, config, Objective::Total(config.lambda))
}

/// Adam over `objective` on the train split, in the model's current freeze
/// mode. Gradients are clipped to `grad_clip` global norm and every layer's
/// `A` is pulled back inside the stability limit after each update.
pub fn train_loop(model: &mut LvlmModel, dataset: &Dataset, config: &TrainConfig, objective: Objective) -> Result<TrainingLog> {
    config.validate_run()?;
    let pool: Vec<usize> = (0..dataset.samples.len())
        .filter(|&i| dataset.samples[i].split == Split::Train)
        .collect();
    let batcher = Batcher::new(pool, config.batch_size, config.seed)?;
    let mut adam = Adam::new(AdamConfig { lr: config.lr, ..AdamConfig::default() });
    let mut log = TrainingLog {
        stage: config.stage,
        records: Vec::with_capacity(config.steps),
        stability_events: Vec::new(),
        clipped_norms: Vec::with_capacity(config.steps),
    };
    let start = Instant::now();
    let per_epoch = batcher.batches_per_epoch();
    let mut epoch_cache: Option<(usize, Vec<Vec<usize>>)> = None;
    for step in 0..config.steps {
        let epoch = step / per_epoch;
        if epoch_cache.as_ref().is_none_or(|(e, _)| *e != epoch) {
            epoch_cache = Some((epoch, batcher.epoch(epoch as u64)));
        }
        let idx = &epoch_cache.as_ref().expect("cached").1[step % per_epoch];
        let batch: Vec<&SyntheticSample> = idx.iter().map(|&i| &dataset.samples[i]).collect();
        let graph = build_loss(model, &batch, objective).map_err(|e| divergence(step, e))?;
        let grads = graph.tape.backward(graph.loss).map_err(|e| divergence(step, e))?;
        model.accumulate(&graph.vars, &grads)?;
        {
            let mut params = model.tensors_mut();
            clip_grad_norm(&mut params, config.grad_clip);
            log.clipped_norms.push(crate::numerics::global_grad_norm(&params));
            adam.step(&mut params)?;
        }
        for (layer, rho) in model.enforce_stability() {
            log.stability_events.push((step, layer, rho));
        }
        if model.named_tensors().iter().any(|(_, t)| t.requires_grad && !t.is_finite()) {
            return Err(Error::Divergence { step, reason: "non-finite parameter after update".into() });
        }
        log.records.push(LogRecord {
            loss: LossBreakdown { step, ..graph.breakdown },
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(log)
}

/// Mean loss breakdown over `samples`, evaluated in one graph.
pub fn evaluate_losses(model: &LvlmModel, samples: &[&SyntheticSample], lambda: f64) -> Result<LossBreakdown> {
    Ok(build_loss(model, samples, Objective::Total(lambda))?.breakdown)
}
