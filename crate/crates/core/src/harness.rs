//! Paired evaluation over seeded target tasks, the ablation matrix and
//! one-parameter sensitivity sweeps.
//!
//! Task `i` of a run with root seed `r` is always drawn with
//! `derive_seed(r, "eval", i)`, so every variant and sweep point sees the
//! same task list. Tasks run on the rayon pool and are merged in index order.

use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{finetune_episode, AdaptConfig, Trace};
use crate::episodes::{Domain, Episode, EpisodeShape};
use crate::error::{Error, Result};
use crate::models::{EncoderParams, PcnParams};
use crate::numfmt::{f17, F17};
use crate::seed::derive_seed;

pub fn eval_seed(root_seed: u64, index: usize) -> u64 {
    derive_seed(root_seed, "eval", index as u64)
}

/// The seeded evaluation tasks `0..n_tasks`.
pub fn eval_episodes(target: &Domain, shape: EpisodeShape, n_tasks: usize, root_seed: u64) -> Result<Vec<Episode>> {
    (0..n_tasks)
        .map(|i| target.sample_episode(shape.n_way, shape.k_shot, shape.q_per_class, eval_seed(root_seed, i)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub per_task_accuracy: Vec<f64>,
    pub seeds: Vec<u64>,
    pub mean: f64,
    pub ci95: f64,
    pub n_tasks: usize,
    pub config_hash: String,
    /// Set when the interval is undefined (a single task) and reported as 0.
    pub ci95_undefined: bool,
}

impl Metrics {
    /// Mean and `1.96·s/√n` with the `n−1` sample standard deviation.
    pub fn from_accuracies(per_task_accuracy: Vec<f64>, seeds: Vec<u64>, config_hash: &str) -> Result<Self> {
        let n = per_task_accuracy.len();
        if n == 0 {
            return Err(Error::arg("metrics need at least one task"));
        }
        if seeds.len() != n {
            return Err(Error::dim(format!("{} seeds for {n} tasks", seeds.len())));
        }
        // Shifted by the first value so identical accuracies give an exact
        // mean and a zero interval.
        let x0 = per_task_accuracy[0];
        let (s1, s2) = per_task_accuracy
            .iter()
            .fold((0.0, 0.0), |(s1, s2), a| (s1 + (a - x0), s2 + (a - x0) * (a - x0)));
        let mean = x0 + s1 / n as f64;
        let (ci95, undefined) = if n == 1 {
            (0.0, true)
        } else {
            let var = ((s2 - s1 * s1 / n as f64) / (n - 1) as f64).max(0.0);
            (1.96 * var.sqrt() / (n as f64).sqrt(), false)
        };
        Ok(Self {
            per_task_accuracy,
            seeds,
            mean,
            ci95,
            n_tasks: n,
            config_hash: config_hash.to_string(),
            ci95_undefined: undefined,
        })
    }

    pub const CSV_HEADER: &'static str = "task_index,seed,accuracy";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for (i, (s, a)) in self.seeds.iter().zip(&self.per_task_accuracy).enumerate() {
            let _ = writeln!(out, "{i},{s},{}", f17(*a));
        }
        out
    }

    pub fn summary_json(&self, variant_id: &str, root_seed: u64) -> Result<String> {
        #[derive(Serialize)]
        struct Summary<'a> {
            config_hash: &'a str,
            root_seed: u64,
            variant_id: &'a str,
            n_tasks: usize,
            mean: F17,
            ci95: F17,
            ci95_undefined: bool,
        }
        let s = Summary {
            config_hash: &self.config_hash,
            root_seed,
            variant_id,
            n_tasks: self.n_tasks,
            mean: F17(self.mean),
            ci95: F17(self.ci95),
            ci95_undefined: self.ci95_undefined,
        };
        let mut text = serde_json::to_string_pretty(&s).map_err(|e| Error::Parse(e.to_string()))?;
        text.push('\n');
        Ok(text)
    }
}

/// Per-task result of [`evaluate_tasks`].
#[derive(Debug, Clone, PartialEq)]
pub struct TaskOutcome {
    pub seed: u64,
    pub accuracy: f64,
    pub initial_accuracy: f64,
    pub predictions: Vec<usize>,
    pub trace: Trace,
}

/// Fine-tunes and scores every episode. Fails if any task fails.
pub fn evaluate_tasks(
    encoder: &EncoderParams,
    pcn: &PcnParams,
    episodes: &[Episode],
    seeds: &[u64],
    cfg: &AdaptConfig,
) -> Result<Vec<TaskOutcome>> {
    if episodes.is_empty() {
        return Err(Error::arg("evaluation needs at least one task"));
    }
    if seeds.len() != episodes.len() {
        return Err(Error::dim(format!(
            "{} seeds for {} tasks",
            seeds.len(),
            episodes.len()
        )));
    }
    cfg.validate()?;
    episodes
        .par_iter()
        .zip(seeds)
        .enumerate()
        .map(|(i, (ep, &seed))| {
            let out = finetune_episode(encoder, pcn, &ep.task(), cfg, seed)
                .map_err(|e| annotate(e, &format!("task {i} (seed {seed})")))?;
            Ok(TaskOutcome {
                seed,
                accuracy: ep.accuracy(&out.predictions),
                initial_accuracy: ep.accuracy(&out.initial_predictions),
                predictions: out.predictions,
                trace: out.trace,
            })
        })
        .collect()
}

fn annotate(e: Error, context: &str) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("{context}: {m}")),
        Error::Dimension(m) => Error::Dimension(format!("{context}: {m}")),
        Error::Argument(m) => Error::Argument(format!("{context}: {m}")),
        other => other,
    }
}

/// Draws the seeded tasks, fine-tunes on each and aggregates accuracy.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    encoder: &EncoderParams,
    pcn: &PcnParams,
    target: &Domain,
    shape: EpisodeShape,
    cfg: &AdaptConfig,
    n_tasks: usize,
    root_seed: u64,
    config_hash: &str,
) -> Result<(Metrics, Vec<TaskOutcome>)> {
    let episodes = eval_episodes(target, shape, n_tasks, root_seed)?;
    let seeds: Vec<u64> = (0..n_tasks).map(|i| eval_seed(root_seed, i)).collect();
    let outcomes = evaluate_tasks(encoder, pcn, &episodes, &seeds, cfg)?;
    let metrics = Metrics::from_accuracies(outcomes.iter().map(|o| o.accuracy).collect(), seeds, config_hash)?;
    Ok((metrics, outcomes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    NoPcn,
    NoLDis,
    NoLCoh,
    NoCeSupport,
    NoCeTransductive,
    NoWma,
    Protonet,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 8] = [
        AblationVariant::Protonet,
        AblationVariant::NoPcn,
        AblationVariant::NoLDis,
        AblationVariant::NoLCoh,
        AblationVariant::NoCeSupport,
        AblationVariant::NoCeTransductive,
        AblationVariant::NoWma,
        AblationVariant::Full,
    ];

    pub fn id(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoPcn => "no_pcn",
            AblationVariant::NoLDis => "no_l_dis",
            AblationVariant::NoLCoh => "no_l_coh",
            AblationVariant::NoCeSupport => "no_ce_support",
            AblationVariant::NoCeTransductive => "no_ce_transductive",
            AblationVariant::NoWma => "no_wma",
            AblationVariant::Protonet => "protonet",
        }
    }

    /// The fine-tuning configuration for this variant, derived from `base`.
    ///
    /// `protonet` uses mean prototypes and fine-tunes on support
    /// cross-entropy only: no PCN, no pseudo-labels, no prototype losses.
    pub fn apply(self, base: &AdaptConfig) -> AdaptConfig {
        let mut c = base.clone();
        match self {
            AblationVariant::Full => {}
            AblationVariant::NoPcn => c.use_pcn = false,
            AblationVariant::NoLDis => c.lambda_dis = 0.0,
            AblationVariant::NoLCoh => c.lambda_coh = 0.0,
            AblationVariant::NoCeSupport => c.use_ce_support = false,
            AblationVariant::NoCeTransductive => c.use_ce_transductive = false,
            AblationVariant::NoWma => c.use_wma = false,
            AblationVariant::Protonet => {
                c.use_pcn = false;
                c.lambda_dis = 0.0;
                c.lambda_coh = 0.0;
                c.use_ce_transductive = false;
                c.epsilon = 1.0;
                c.use_wma = false;
            }
        }
        c
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.id() == s).ok_or_else(|| {
            let ids: Vec<&str> = Self::ALL.iter().map(|v| v.id()).collect();
            Error::arg(format!("unknown variant {s:?}; expected one of {}", ids.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub metrics: Metrics,
    pub outcomes: Vec<TaskOutcome>,
}

/// Evaluates every variant on the identical task list.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    variants: &[AblationVariant],
    encoder: &EncoderParams,
    pcn: &PcnParams,
    target: &Domain,
    shape: EpisodeShape,
    base: &AdaptConfig,
    n_tasks: usize,
    root_seed: u64,
    config_hash: &str,
) -> Result<Vec<AblationRow>> {
    let episodes = eval_episodes(target, shape, n_tasks, root_seed)?;
    let seeds: Vec<u64> = (0..n_tasks).map(|i| eval_seed(root_seed, i)).collect();
    variants
        .iter()
        .map(|&v| {
            let outcomes = evaluate_tasks(encoder, pcn, &episodes, &seeds, &v.apply(base))?;
            let metrics = Metrics::from_accuracies(
                outcomes.iter().map(|o| o.accuracy).collect(),
                seeds.clone(),
                config_hash,
            )?;
            Ok(AblationRow {
                variant: v,
                metrics,
                outcomes,
            })
        })
        .collect()
}

pub const ABLATION_CSV_HEADER: &str = "variant,mean,ci95,n_tasks";

/// One row per variant: mean accuracy, interval and task count.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.variant.id(),
            f17(r.metrics.mean),
            f17(r.metrics.ci95),
            r.metrics.n_tasks
        );
    }
    out
}

pub fn ablation_markdown(rows: &[AblationRow]) -> String {
    let mut out = String::from("| Method | Accuracy (%) |\n|---|---|\n");
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {:.2} ± {:.2} |",
            r.variant.id(),
            100.0 * r.metrics.mean,
            100.0 * r.metrics.ci95
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Alpha0,
    Epsilon,
    LambdaCoh,
    LambdaDis,
}

impl SweepParam {
    pub fn id(self) -> &'static str {
        match self {
            SweepParam::Alpha0 => "alpha0",
            SweepParam::Epsilon => "epsilon",
            SweepParam::LambdaCoh => "lambda_coh",
            SweepParam::LambdaDis => "lambda_dis",
        }
    }

    pub fn apply(self, base: &AdaptConfig, value: f64) -> AdaptConfig {
        let mut c = base.clone();
        match self {
            SweepParam::Alpha0 => c.alpha0 = value,
            SweepParam::Epsilon => c.epsilon = value,
            SweepParam::LambdaCoh => c.lambda_coh = value,
            SweepParam::LambdaDis => c.lambda_dis = value,
        }
        c
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            SweepParam::Alpha0,
            SweepParam::Epsilon,
            SweepParam::LambdaCoh,
            SweepParam::LambdaDis,
        ]
        .into_iter()
        .find(|p| p.id() == s)
        .ok_or_else(|| {
            Error::arg(format!(
                "unknown sweep parameter {s:?}; expected alpha0, epsilon, lambda_coh or lambda_dis"
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub metrics: Metrics,
}

/// Metrics for each grid value on the identical task list.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    param: SweepParam,
    grid: &[f64],
    encoder: &EncoderParams,
    pcn: &PcnParams,
    target: &Domain,
    shape: EpisodeShape,
    base: &AdaptConfig,
    n_tasks: usize,
    root_seed: u64,
    config_hash: &str,
) -> Result<Vec<SweepPoint>> {
    if grid.is_empty() {
        return Err(Error::arg("sweep grid is empty"));
    }
    let episodes = eval_episodes(target, shape, n_tasks, root_seed)?;
    let seeds: Vec<u64> = (0..n_tasks).map(|i| eval_seed(root_seed, i)).collect();
    grid.iter()
        .map(|&value| {
            let cfg = param.apply(base, value);
            cfg.validate()
                .map_err(|e| Error::config(format!("sweep value {value} for {}: {e}", param.id())))?;
            let outcomes = evaluate_tasks(encoder, pcn, &episodes, &seeds, &cfg)?;
            let metrics = Metrics::from_accuracies(
                outcomes.iter().map(|o| o.accuracy).collect(),
                seeds.clone(),
                config_hash,
            )?;
            Ok(SweepPoint { value, metrics })
        })
        .collect()
}

pub const SWEEP_CSV_HEADER: &str = "param,value,mean,ci95,n_tasks";

pub fn sweep_csv(param: SweepParam, points: &[SweepPoint]) -> String {
    let mut out = format!("{SWEEP_CSV_HEADER}\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            param.id(),
            f17(p.value),
            f17(p.metrics.mean),
            f17(p.metrics.ci95),
            p.metrics.n_tasks
        );
    }
    out
}
