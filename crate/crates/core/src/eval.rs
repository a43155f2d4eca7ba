//! Metrics, evaluation protocols and the text report format.
//!
//! A report is UTF-8 text. Header lines are `key=value`; the line `[rows]`
//! ends the header and is followed by a tab-separated column line and one
//! line per configuration:
//!
//! ```text
//! kind=standard
//! stage=finetune
//! token_accuracy=0.97
//! bleu4=0.91
//! trainable_ratio=0.0427...
//! trainable_ratio_target=0.005
//! seeds=0
//! aggregation=median
//! [rows]
//! ablation  noise_sigma  freeze_mode  token_accuracy  bleu4  reconstruction_mse  delta_accuracy
//! none      0            finetune_ssm 0.97            0.91   0.0012              0
//! ```
//!
//! Protocol-specific keys follow `aggregation` in a fixed order. Floats are
//! written in the shortest form that parses back to the same `f64`.

use std::fmt::Write as _;

use crate::data::{add_noise, Dataset, SyntheticSample};
use crate::error::{Error, Result};
use crate::model::{Ablation, FreezeMode, LvlmConfig, LvlmModel};
use crate::rng::SplitMix64;
use crate::training::{evaluate_losses, run_stage1, run_stage2, shift, Stage, TrainConfig, TrainingLog};

/// Trainable fraction reported for the full-scale method, printed next to
/// the measured ratio for comparison.
pub const TARGET_TRAINABLE_RATIO: f64 = 0.005;

/// Fraction of next-token predictions (argmax) that equal the targets.
pub fn token_accuracy(model: &LvlmModel, samples: &[&SyntheticSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::contract("accuracy over an empty split"));
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for s in samples {
        let (inputs, targets) = shift(&s.tokens)?;
        let pred = model.predict(inputs, &s.raw_visual)?;
        hit += pred.iter().zip(targets).filter(|(p, t)| p == t).count();
        total += targets.len();
    }
    Ok(hit as f64 / total as f64)
}

fn ngrams(seq: &[usize], k: usize) -> Vec<&[usize]> {
    if seq.len() < k {
        return Vec::new();
    }
    seq.windows(k).collect()
}

/// Single-reference BLEU with orders `1..=n`, uniform weights and brevity
/// penalty `exp(1 − r/c)` when `c < r`. An order with zero clipped matches
/// uses precision `1 / (2 · total)`, where `total` counts the candidate's
/// n-grams of that order. Orders longer than the candidate are dropped from
/// the mean. An empty candidate scores 0.
pub fn bleu_n(candidate: &[usize], reference: &[usize], n: usize) -> f64 {
    assert!(n >= 1, "BLEU order must be at least 1");
    if candidate.is_empty() {
        return 0.0;
    }
    let orders = n.min(candidate.len());
    let mut log_sum = 0.0;
    for k in 1..=orders {
        let cand = ngrams(candidate, k);
        let mut refs = ngrams(reference, k);
        let total = cand.len();
        let mut matches = 0usize;
        for g in &cand {
            if let Some(pos) = refs.iter().position(|r| r == g) {
                refs.swap_remove(pos);
                matches += 1;
            }
        }
        let p = if matches == 0 {
            1.0 / (2.0 * total as f64)
        } else {
            matches as f64 / total as f64
        };
        log_sum += p.ln();
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    bp * (log_sum / orders as f64).exp()
}

/// Mean BLEU-4 of greedy captions. Each caption is decoded from its first
/// ground-truth token and scored against the remaining tokens.
pub fn caption_bleu(model: &LvlmModel, samples: &[&SyntheticSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::contract("BLEU over an empty split"));
    }
    let mut sum = 0.0;
    for s in samples {
        let (_, reference) = shift(&s.tokens)?;
        let cand = model.greedy_decode(&s.tokens[..1], &s.raw_visual, reference.len())?;
        sum += bleu_n(&cand, reference, 4);
    }
    Ok(sum / samples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub token_accuracy: f64,
    pub bleu4: f64,
    pub reconstruction_mse: f64,
}

pub fn evaluate(model: &LvlmModel, samples: &[&SyntheticSample]) -> Result<Metrics> {
    Ok(Metrics {
        token_accuracy: token_accuracy(model, samples)?,
        bleu4: caption_bleu(model, samples)?,
        reconstruction_mse: evaluate_losses(model, samples, 1.0)?.pretrain_term,
    })
}

/// Median, averaging the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn median_metrics(runs: &[Metrics]) -> Metrics {
    let pick = |f: fn(&Metrics) -> f64| median(&runs.iter().map(f).collect::<Vec<_>>());
    Metrics {
        token_accuracy: pick(|m| m.token_accuracy),
        bleu4: pick(|m| m.bleu4),
        reconstruction_mse: pick(|m| m.reconstruction_mse),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportKind {
    Standard,
    Ablate,
    Robustness,
    ZeroShot,
}

impl ReportKind {
    pub fn name(self) -> &'static str {
        match self {
            ReportKind::Standard => "standard",
            ReportKind::Ablate => "ablate",
            ReportKind::Robustness => "robustness",
            ReportKind::ZeroShot => "zero_shot",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [ReportKind::Standard, ReportKind::Ablate, ReportKind::Robustness, ReportKind::ZeroShot]
            .into_iter()
            .find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub ablation: Ablation,
    pub noise_sigma: f64,
    pub freeze_mode: FreezeMode,
    pub token_accuracy: f64,
    pub bleu4: f64,
    pub reconstruction_mse: f64,
    /// Accuracy lost relative to the clean row of the same configuration.
    pub delta_accuracy: f64,
}

impl ReportRow {
    fn new(ablation: Ablation, noise_sigma: f64, freeze_mode: FreezeMode, m: Metrics) -> Self {
        Self {
            ablation,
            noise_sigma,
            freeze_mode,
            token_accuracy: m.token_accuracy,
            bleu4: m.bleu4,
            reconstruction_mse: m.reconstruction_mse,
            delta_accuracy: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub kind: ReportKind,
    pub stage: String,
    pub token_accuracy: f64,
    pub bleu4: f64,
    pub trainable_ratio: f64,
    pub seeds: Vec<u64>,
    pub rows: Vec<ReportRow>,
    /// Protocol-specific header entries, in output order.
    pub extras: Vec<(String, String)>,
}

const COLUMNS: [&str; 7] = [
    "ablation",
    "noise_sigma",
    "freeze_mode",
    "token_accuracy",
    "bleu4",
    "reconstruction_mse",
    "delta_accuracy",
];

/// Position of a report line: 1-based line number and byte offset.
#[derive(Clone, Copy)]
struct At(usize, usize);

fn fmt_err(check: impl Into<String>, at: At) -> Error {
    Error::Format { check: format!("report line {}: {}", at.0, check.into()), offset: at.1 }
}

fn parse_f64(s: &str, at: At) -> Result<f64> {
    s.parse().map_err(|_| fmt_err(format!("bad number {s:?}"), at))
}

fn parse_ablation(s: &str) -> Option<Ablation> {
    Ablation::ALL.into_iter().find(|a| a.name() == s)
}

fn parse_mode(s: &str) -> Option<FreezeMode> {
    [FreezeMode::PretrainSsm, FreezeMode::FinetuneSsm, FreezeMode::Full, FreezeMode::Frozen]
        .into_iter()
        .find(|m| m.name() == s)
}

impl EvalReport {
    pub fn extra(&self, key: &str) -> Option<&str> {
        self.extras.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn row(&self, ablation: Ablation, noise_sigma: f64) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.ablation == ablation && r.noise_sigma == noise_sigma)
    }

    /// All metrics in `[0, 1]` and rows keyed uniquely by configuration.
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.token_accuracy) || !unit(self.bleu4) || !unit(self.trainable_ratio) {
            return Err(Error::contract("report metric outside [0, 1]"));
        }
        for (i, r) in self.rows.iter().enumerate() {
            if !unit(r.token_accuracy) || !unit(r.bleu4) {
                return Err(Error::contract(format!("row {i} metric outside [0, 1]")));
            }
            let dup = self.rows[..i]
                .iter()
                .any(|o| o.ablation == r.ablation && o.noise_sigma == r.noise_sigma && o.freeze_mode == r.freeze_mode);
            if dup {
                return Err(Error::contract(format!("row {i} duplicates an earlier configuration")));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(out, "kind={}", self.kind.name());
        let _ = writeln!(out, "stage={}", self.stage);
        let _ = writeln!(out, "token_accuracy={}", self.token_accuracy);
        let _ = writeln!(out, "bleu4={}", self.bleu4);
        let _ = writeln!(out, "trainable_ratio={}", self.trainable_ratio);
        let _ = writeln!(out, "trainable_ratio_target={TARGET_TRAINABLE_RATIO}");
        let _ = writeln!(out, "seeds={}", seeds.join(","));
        let _ = writeln!(out, "aggregation=median");
        for (k, v) in &self.extras {
            let _ = writeln!(out, "{k}={v}");
        }
        out.push_str("[rows]\n");
        out.push_str(&COLUMNS.join("\t"));
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.ablation.name(),
                r.noise_sigma,
                r.freeze_mode.name(),
                r.token_accuracy,
                r.bleu4,
                r.reconstruction_mse,
                r.delta_accuracy
            );
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let end = At(text.lines().count() + 1, text.len());
        let mut offset = 0;
        let mut lines = text.split_inclusive('\n').enumerate().map(|(i, raw)| {
            let at = At(i + 1, offset);
            offset += raw.len();
            (at, raw.strip_suffix('\n').unwrap_or(raw))
        });
        let mut header: Vec<(String, String, At)> = Vec::new();
        loop {
            let (no, line) = lines.next().ok_or_else(|| fmt_err("missing [rows] section", end))?;
            if line == "[rows]" {
                break;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| fmt_err("expected key=value", no))?;
            header.push((k.to_string(), v.to_string(), no));
        }
        let take = |key: &str| -> Result<(String, At)> {
            header
                .iter()
                .find(|(k, _, _)| k == key)
                .map(|(_, v, no)| (v.clone(), *no))
                .ok_or_else(|| fmt_err(format!("missing key {key}"), end))
        };
        let num = |key: &str| -> Result<f64> {
            let (v, no) = take(key)?;
            parse_f64(&v, no)
        };
        let (kind_s, kind_no) = take("kind")?;
        let kind = ReportKind::parse(&kind_s).ok_or_else(|| fmt_err(format!("unknown kind {kind_s}"), kind_no))?;
        let (seeds_s, seeds_no) = take("seeds")?;
        let seeds = if seeds_s.is_empty() {
            Vec::new()
        } else {
            seeds_s
                .split(',')
                .map(|s| s.parse().map_err(|_| fmt_err(format!("bad seed {s:?}"), seeds_no)))
                .collect::<Result<Vec<u64>>>()?
        };
        const FIXED: [&str; 8] = [
            "kind",
            "stage",
            "token_accuracy",
            "bleu4",
            "trainable_ratio",
            "trainable_ratio_target",
            "seeds",
            "aggregation",
        ];
        let extras = header
            .iter()
            .filter(|(k, _, _)| !FIXED.contains(&k.as_str()))
            .map(|(k, v, _)| (k.clone(), v.clone()))
            .collect();
        let (col_no, cols) = lines.next().ok_or_else(|| fmt_err("missing column line", end))?;
        if cols.split('\t').collect::<Vec<_>>() != COLUMNS {
            return Err(fmt_err("unexpected columns", col_no));
        }
        let mut rows = Vec::new();
        for (no, line) in lines {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != COLUMNS.len() {
                return Err(fmt_err(format!("expected {} fields", COLUMNS.len()), no));
            }
            rows.push(ReportRow {
                ablation: parse_ablation(f[0]).ok_or_else(|| fmt_err(format!("unknown ablation {}", f[0]), no))?,
                noise_sigma: parse_f64(f[1], no)?,
                freeze_mode: parse_mode(f[2]).ok_or_else(|| fmt_err(format!("unknown freeze mode {}", f[2]), no))?,
                token_accuracy: parse_f64(f[3], no)?,
                bleu4: parse_f64(f[4], no)?,
                reconstruction_mse: parse_f64(f[5], no)?,
                delta_accuracy: parse_f64(f[6], no)?,
            });
        }
        Ok(Self {
            kind,
            stage: take("stage")?.0,
            token_accuracy: num("token_accuracy")?,
            bleu4: num("bleu4")?,
            trainable_ratio: num("trainable_ratio")?,
            seeds,
            rows,
            extras,
        })
    }
}

/// Held-out metrics of one model in its current configuration.
pub fn run_standard(model: &LvlmModel, dataset: &Dataset, stage: &str) -> Result<EvalReport> {
    let m = evaluate(model, &dataset.held_out())?;
    Ok(EvalReport {
        kind: ReportKind::Standard,
        stage: stage.to_string(),
        token_accuracy: m.token_accuracy,
        bleu4: m.bleu4,
        trainable_ratio: model.trainable_ratio(),
        seeds: Vec::new(),
        rows: vec![ReportRow::new(model.config().ablation, 0.0, model.freeze_mode(), m)],
        extras: Vec::new(),
    })
}

/// Training plan for one seed of a protocol run: model seed `s`, and each
/// stage's batch seed offset by `s`. A stage with `steps = 0` is skipped.
#[derive(Debug, Clone)]
pub struct TwoStagePlan {
    pub model: LvlmConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct TwoStageRun {
    pub model: LvlmModel,
    /// Snapshot between the stages.
    pub after_stage1: LvlmModel,
    pub stage1: Option<TrainingLog>,
    pub stage2: Option<TrainingLog>,
}

impl TwoStagePlan {
    pub fn run(&self, dataset: &Dataset, seed: u64) -> Result<TwoStageRun> {
        let mut model = LvlmModel::new(self.model.clone(), seed)?;
        let stage1 = if self.pretrain.steps > 0 {
            let cfg = TrainConfig { seed: self.pretrain.seed.wrapping_add(seed), ..self.pretrain.clone() };
            Some(run_stage1(&mut model, dataset, &cfg)?)
        } else {
            None
        };
        let after_stage1 = model.clone();
        let stage2 = if self.finetune.steps > 0 {
            let cfg = TrainConfig { seed: self.finetune.seed.wrapping_add(seed), ..self.finetune.clone() };
            Some(run_stage2(&mut model, dataset, &cfg)?)
        } else {
            None
        };
        model.set_freeze_mode(FreezeMode::FinetuneSsm);
        Ok(TwoStageRun { model, after_stage1, stage1, stage2 })
    }
}

/// Trains every ablation for every seed and reports held-out medians.
pub fn run_ablations(plan: &TwoStagePlan, dataset: &Dataset, seeds: &[u64]) -> Result<EvalReport> {
    if seeds.is_empty() {
        return Err(Error::contract("ablation study needs at least one seed"));
    }
    let held = dataset.held_out();
    let mut rows = Vec::new();
    let mut ratio = 0.0;
    for ablation in Ablation::ALL {
        let mut cfg = plan.clone();
        cfg.model.ablation = ablation;
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &s in seeds {
            let run = cfg.run(dataset, s)?;
            ratio = run.model.trainable_ratio();
            per_seed.push(evaluate(&run.model, &held)?);
        }
        rows.push(ReportRow::new(ablation, 0.0, FreezeMode::FinetuneSsm, median_metrics(&per_seed)));
    }
    let acc = |a: Ablation| rows.iter().find(|r| r.ablation == a).expect("row").token_accuracy;
    let (full, nsd, nv) = (acc(Ablation::None), acc(Ablation::NoStateDynamics), acc(Ablation::NoVisual));
    Ok(EvalReport {
        kind: ReportKind::Ablate,
        stage: "finetune".into(),
        token_accuracy: full,
        bleu4: rows[0].bleu4,
        trainable_ratio: ratio,
        seeds: seeds.to_vec(),
        extras: vec![
            ("chance".into(), (1.0 / plan.model.vocab as f64).to_string()),
            ("ordering_holds".into(), (full >= nsd && nsd >= nv).to_string()),
            ("full_minus_no_visual".into(), (full - nv).to_string()),
        ],
        rows,
    })
}

/// Held-out split with every raw visual vector perturbed by `N(0, σ²)`
/// noise. Sample `i` draws from `SplitMix64::derive(seed, i)`.
pub fn noisy_held_out(dataset: &Dataset, sigma: f64, seed: u64) -> Result<Vec<SyntheticSample>> {
    dataset
        .held_out()
        .into_iter()
        .enumerate()
        .map(|(i, s)| add_noise(s, sigma, SplitMix64::derive(seed, i as u64).next_u64()))
        .collect()
}

/// Held-out metrics under input noise, one row per σ (median over noise
/// seeds), with `delta_accuracy = acc(0) − acc(σ)`.
pub fn run_robustness(model: &LvlmModel, dataset: &Dataset, sigmas: &[f64], seeds: &[u64]) -> Result<EvalReport> {
    if !sigmas.contains(&0.0) {
        return Err(Error::contract("robustness sweep must include sigma = 0"));
    }
    if seeds.is_empty() {
        return Err(Error::contract("robustness sweep needs at least one seed"));
    }
    let mut rows = Vec::with_capacity(sigmas.len());
    for &sigma in sigmas {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &s in seeds {
            let noisy = noisy_held_out(dataset, sigma, s)?;
            let refs: Vec<&SyntheticSample> = noisy.iter().collect();
            per_seed.push(evaluate(model, &refs)?);
        }
        rows.push(ReportRow::new(model.config().ablation, sigma, model.freeze_mode(), median_metrics(&per_seed)));
    }
    let clean = rows.iter().find(|r| r.noise_sigma == 0.0).expect("sigma 0 row").token_accuracy;
    for r in &mut rows {
        r.delta_accuracy = clean - r.token_accuracy;
    }
    let mut by_sigma: Vec<&ReportRow> = rows.iter().collect();
    by_sigma.sort_by(|a, b| a.noise_sigma.total_cmp(&b.noise_sigma));
    let monotone = by_sigma.windows(2).all(|w| w[1].delta_accuracy >= w[0].delta_accuracy);
    let clean_row = rows.iter().find(|r| r.noise_sigma == 0.0).expect("sigma 0 row").clone();
    Ok(EvalReport {
        kind: ReportKind::Robustness,
        stage: "finetune".into(),
        token_accuracy: clean_row.token_accuracy,
        bleu4: clean_row.bleu4,
        trainable_ratio: model.trainable_ratio(),
        seeds: seeds.to_vec(),
        extras: vec![
            ("chance".into(), (1.0 / model.config().vocab as f64).to_string()),
            ("input_std".into(), "1".into()),
            ("delta_monotone".into(), monotone.to_string()),
        ],
        rows,
    })
}

/// Evaluates a Stage-1-only model with every tensor frozen.
pub fn run_zero_shot(model: &mut LvlmModel, dataset: &Dataset, completed: Stage) -> Result<EvalReport> {
    if completed != Stage::Pretrain {
        return Err(Error::Stage(format!(
            "zero-shot evaluation needs a pretrain-stage model, got {}",
            completed.name()
        )));
    }
    model.set_freeze_mode(FreezeMode::Frozen);
    let m = evaluate(model, &dataset.held_out())?;
    Ok(EvalReport {
        kind: ReportKind::ZeroShot,
        stage: "pretrain_only".into(),
        token_accuracy: m.token_accuracy,
        bleu4: m.bleu4,
        trainable_ratio: model.trainable_ratio(),
        seeds: Vec::new(),
        rows: vec![ReportRow::new(model.config().ablation, 0.0, FreezeMode::Frozen, m)],
        extras: vec![("chance".into(), (1.0 / model.config().vocab as f64).to_string())],
    })
}
