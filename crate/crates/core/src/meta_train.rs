//! Episodic source-domain training.
//!
//! Each episode first adapts the encoder with a few SGD steps on support
//! cross-entropy (PCN frozen), then takes one optimizer step on the PCN
//! against query cross-entropy plus the discriminative and cohesive terms
//! (encoder frozen). The encoder carries over from episode to episode unless
//! `reset_theta` is set.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{embed_rows, group_by_class};
use crate::autodiff::Tape;
use crate::episodes::{Domain, Episode, EpisodeShape, Sample};
use crate::error::{Error, Result};
use crate::losses::{self, argmax, LossBreakdown, LossWeights};
use crate::models::{EncoderParams, Linear, Optimizer, OptimizerKind, PcnParams};
use crate::numfmt::f17;
use crate::prototypes::{build_prototypes, PrototypeMethod};
use crate::seed::{derive_rng, derive_seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaTrainConfig {
    /// Number of episodes.
    pub iters: usize,
    /// Encoder SGD steps on support CE per episode.
    pub inner_iters: usize,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub outer_weight_decay: f64,
    pub outer_optimizer: OptimizerKind,
    pub lambda_dis: f64,
    pub lambda_coh: f64,
    /// Restore the encoder to its starting point before every episode.
    pub reset_theta: bool,
    /// Also step the encoder in the outer update, with the outer optimizer
    /// settings.
    pub joint_update: bool,
    /// Plain classification steps on source classes before episodes start.
    pub warmup_iters: usize,
    pub warmup_lr: f64,
    pub warmup_batch: usize,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        Self {
            iters: 2000,
            inner_iters: 5,
            inner_lr: 1e-2,
            outer_lr: 1e-6,
            outer_weight_decay: 1e-2,
            outer_optimizer: OptimizerKind::Adam,
            lambda_dis: 0.1,
            lambda_coh: 1e-3,
            reset_theta: false,
            joint_update: false,
            warmup_iters: 0,
            warmup_lr: 1e-2,
            warmup_batch: 32,
        }
    }
}

impl MetaTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("meta_train.{key} must be a finite number > 0")))
            }
        };
        pos("inner_lr", self.inner_lr)?;
        pos("outer_lr", self.outer_lr)?;
        pos("warmup_lr", self.warmup_lr)?;
        for (key, v) in [
            ("outer_weight_decay", self.outer_weight_decay),
            ("lambda_dis", self.lambda_dis),
            ("lambda_coh", self.lambda_coh),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("meta_train.{key} must be a finite number >= 0")));
            }
        }
        if self.warmup_iters > 0 && self.warmup_batch == 0 {
            return Err(Error::config("meta_train.warmup_batch must be >= 1"));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_dis: self.lambda_dis,
            lambda_coh: self.lambda_coh,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurveRow {
    pub iter: usize,
    pub ce_query: f64,
    pub l_dis: f64,
    pub l_coh: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainCurve {
    pub rows: Vec<CurveRow>,
}

impl TrainCurve {
    pub const CSV_HEADER: &'static str = "iter,ce_query,l_dis,l_coh,total";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.iter,
                f17(r.ce_query),
                f17(r.l_dis),
                f17(r.l_coh),
                f17(r.total)
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaTrainOutput {
    pub encoder: EncoderParams,
    pub pcn: PcnParams,
    pub curve: TrainCurve,
}

fn support_parts(support: &[Sample]) -> (Vec<&[f64]>, Vec<usize>) {
    (
        support.iter().map(|s| s.x.as_slice()).collect(),
        support.iter().map(|s| s.label).collect(),
    )
}

/// Support cross-entropy of `theta` on `support`, prototypes from the same
/// embeddings.
pub fn support_ce(
    theta: &EncoderParams,
    pcn: &PcnParams,
    support: &[Sample],
    n_way: usize,
    method: PrototypeMethod,
    seed: u64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let enc = theta.bind(&mut tape, false);
    let (x, y) = support_parts(support);
    let e = embed_rows(&mut tape, &enc, &x)?;
    let groups = group_by_class(&e, &y, n_way);
    let bp = pcn.bind(&mut tape, false);
    let protos = build_prototypes(&mut tape, &groups, method, Some(&bp), seed)?;
    let probs = e
        .iter()
        .map(|&v| losses::class_probs(&mut tape, v, &protos))
        .collect::<Result<Vec<_>>>()?;
    let ce = losses::ce_labeled(&mut tape, &probs, &y)?;
    Ok(tape.scalar(ce))
}

/// `iters` SGD steps on support cross-entropy, PCN frozen. Returns the loss
/// before each step.
#[allow(clippy::too_many_arguments)]
pub fn inner_adapt(
    theta: &mut EncoderParams,
    pcn: &PcnParams,
    support: &[Sample],
    n_way: usize,
    method: PrototypeMethod,
    lr: f64,
    iters: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if support.is_empty() {
        return Err(Error::arg("inner adaptation needs a non-empty support set"));
    }
    let mut opt = Optimizer::sgd(lr);
    let (x, y) = support_parts(support);
    let mut losses_seen = Vec::with_capacity(iters);
    for step in 0..iters {
        let mut tape = Tape::new();
        let enc = theta.bind(&mut tape, true);
        let e = embed_rows(&mut tape, &enc, &x)?;
        let groups = group_by_class(&e, &y, n_way);
        let bp = pcn.bind(&mut tape, false);
        let protos = build_prototypes(&mut tape, &groups, method, Some(&bp), seed)?;
        let probs = e
            .iter()
            .map(|&v| losses::class_probs(&mut tape, v, &protos))
            .collect::<Result<Vec<_>>>()?;
        let ce = losses::ce_labeled(&mut tape, &probs, &y)?;
        let v = tape.scalar(ce);
        if !v.is_finite() {
            return Err(Error::Numeric(format!(
                "support loss is {v} at inner step {step} (episode seed {seed})"
            )));
        }
        losses_seen.push(v);
        tape.backward(ce)?;
        opt.step(theta.slots_mut(), &enc.grads(&tape))?;
    }
    Ok(losses_seen)
}

/// Meta-training objective on one episode, without updating anything.
pub fn train_loss(
    theta: &EncoderParams,
    pcn: &PcnParams,
    episode: &Episode,
    weights: LossWeights,
    method: PrototypeMethod,
    seed: u64,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let enc = theta.bind(&mut tape, false);
    let bp = pcn.bind(&mut tape, false);
    let (_, b) = record_train_loss(&mut tape, &enc, &bp, episode, weights, method, seed)?;
    Ok(b)
}

fn record_train_loss(
    tape: &mut Tape,
    enc: &crate::models::BoundEncoder,
    pcn: &crate::models::BoundPcn,
    episode: &Episode,
    weights: LossWeights,
    method: PrototypeMethod,
    seed: u64,
) -> Result<(crate::autodiff::Var, LossBreakdown)> {
    let (sx, sy) = support_parts(&episode.support);
    let se = embed_rows(tape, enc, &sx)?;
    let groups = group_by_class(&se, &sy, episode.n_way);
    let protos = build_prototypes(tape, &groups, method, Some(pcn), seed)?;
    let (qx, qy) = support_parts(&episode.query);
    let qe = embed_rows(tape, enc, &qx)?;
    losses::loss_train(tape, &protos, &qe, &qy, weights)
}

/// One optimizer step on the PCN (and on the encoder when `theta_opt` is
/// given) against the meta-training objective.
#[allow(clippy::too_many_arguments)]
pub fn outer_step(
    pcn: &mut PcnParams,
    theta: &mut EncoderParams,
    episode: &Episode,
    weights: LossWeights,
    method: PrototypeMethod,
    pcn_opt: &mut Optimizer,
    theta_opt: Option<&mut Optimizer>,
    seed: u64,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let enc = theta.bind(&mut tape, theta_opt.is_some());
    let bp = pcn.bind(&mut tape, true);
    let (total, b) = record_train_loss(&mut tape, &enc, &bp, episode, weights, method, seed)?;
    if !b.total.is_finite() {
        return Err(Error::Numeric(format!(
            "meta-training loss is {} (episode seed {seed})",
            b.total
        )));
    }
    tape.backward(total)?;
    pcn_opt.step(pcn.slots_mut(), &bp.grads(&tape))?;
    if let Some(opt) = theta_opt {
        opt.step(theta.slots_mut(), &enc.grads(&tape))?;
    }
    Ok(b)
}

/// Query accuracy of plain prototype classification, no adaptation.
pub fn episode_accuracy(
    theta: &EncoderParams,
    pcn: &PcnParams,
    episode: &Episode,
    method: PrototypeMethod,
    seed: u64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let enc = theta.bind(&mut tape, false);
    let bp = pcn.bind(&mut tape, false);
    let (sx, sy) = support_parts(&episode.support);
    let se = embed_rows(&mut tape, &enc, &sx)?;
    let groups = group_by_class(&se, &sy, episode.n_way);
    let protos = build_prototypes(&mut tape, &groups, method, Some(&bp), seed)?;
    let (qx, _) = support_parts(&episode.query);
    let qe = embed_rows(&mut tape, &enc, &qx)?;
    let preds = qe
        .iter()
        .map(|&e| {
            let h = losses::distance_vector(&mut tape, e, &protos)?;
            let p = crate::autodiff::softmax_neg_values(tape.value(h).data());
            Ok(argmax(&p))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(episode.accuracy(&preds))
}

/// Plain softmax classification of source samples with a throwaway linear
/// head, updating the encoder.
pub fn warmup(theta: &mut EncoderParams, source: &Domain, cfg: &MetaTrainConfig, root_seed: u64) -> Result<()> {
    if cfg.warmup_iters == 0 {
        return Ok(());
    }
    let classes = source.num_classes();
    let mut init_rng = derive_rng(root_seed, "warmup-head", 0);
    let mut head = Linear::init(theta.output_dim(), classes, &mut init_rng);
    let mut opt = Optimizer::sgd(cfg.warmup_lr);
    let mut head_opt = Optimizer::sgd(cfg.warmup_lr);
    for it in 0..cfg.warmup_iters {
        let mut rng = derive_rng(root_seed, "warmup", it as u64);
        let batch: Vec<(Vec<f64>, usize)> = (0..cfg.warmup_batch)
            .map(|_| {
                let c = rng.random_range(0..classes);
                (source.sample_class(c, &mut rng), c)
            })
            .collect();
        let mut tape = Tape::new();
        let enc = theta.bind(&mut tape, true);
        let w = tape.param(head.weight.clone());
        let b = tape.param(head.bias.clone());
        let x: Vec<&[f64]> = batch.iter().map(|(x, _)| x.as_slice()).collect();
        let e = embed_rows(&mut tape, &enc, &x)?;
        let probs = e
            .iter()
            .map(|&r| {
                let l = tape.matmul(r, w)?;
                let l = tape.add(l, b)?;
                let neg = tape.scale(l, -1.0);
                Ok(tape.softmax_neg(neg))
            })
            .collect::<Result<Vec<_>>>()?;
        let y: Vec<usize> = batch.iter().map(|(_, c)| *c).collect();
        let ce = losses::ce_labeled(&mut tape, &probs, &y)?;
        let mean = tape.scale(ce, 1.0 / y.len() as f64);
        if !tape.scalar(mean).is_finite() {
            return Err(Error::Numeric(format!("warm-up loss is non-finite at step {it}")));
        }
        tape.backward(mean)?;
        opt.step(theta.slots_mut(), &enc.grads(&tape))?;
        let hg = vec![
            tape.grad(w).expect("head weight is trainable").to_vec(),
            tape.grad(b).expect("head bias is trainable").to_vec(),
        ];
        head_opt.step(
            vec![
                ("head.weight".into(), head.weight.data_mut()),
                ("head.bias".into(), head.bias.data_mut()),
            ],
            &hg,
        )?;
    }
    Ok(())
}

/// Runs the full episodic loop from the given initial parameters. Episode
/// `i` is drawn with seed `derive_seed(root_seed, "meta-train", i)`.
#[allow(clippy::too_many_arguments)]
pub fn meta_train(
    cfg: &MetaTrainConfig,
    shape: EpisodeShape,
    source: &Domain,
    encoder: EncoderParams,
    pcn: PcnParams,
    method: PrototypeMethod,
    root_seed: u64,
    mut progress: impl FnMut(&CurveRow),
) -> Result<MetaTrainOutput> {
    cfg.validate()?;
    shape.validate()?;
    let mut theta = encoder;
    let mut phi = pcn;
    warmup(&mut theta, source, cfg, root_seed)?;
    let theta0 = theta.clone();
    let mut pcn_opt = Optimizer::new(cfg.outer_optimizer, cfg.outer_lr, cfg.outer_weight_decay);
    let mut theta_opt = cfg
        .joint_update
        .then(|| Optimizer::new(cfg.outer_optimizer, cfg.outer_lr, cfg.outer_weight_decay));
    let mut curve = TrainCurve::default();
    for iter in 0..cfg.iters {
        let ep_seed = derive_seed(root_seed, "meta-train", iter as u64);
        let episode = source.sample_episode(shape.n_way, shape.k_shot, shape.q_per_class, ep_seed)?;
        if cfg.reset_theta {
            theta = theta0.clone();
        }
        inner_adapt(
            &mut theta,
            &phi,
            &episode.support,
            shape.n_way,
            method,
            cfg.inner_lr,
            cfg.inner_iters,
            ep_seed,
        )
        .map_err(|e| Error::Numeric(format!("episode {iter} (seed {ep_seed}): {e}")))?;
        let b = outer_step(
            &mut phi,
            &mut theta,
            &episode,
            cfg.weights(),
            method,
            &mut pcn_opt,
            theta_opt.as_mut(),
            ep_seed,
        )
        .map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("episode {iter}: {m}")),
            other => other,
        })?;
        let row = CurveRow {
            iter,
            ce_query: b.ce_query,
            l_dis: b.l_dis,
            l_coh: b.l_coh,
            total: b.total,
        };
        progress(&row);
        curve.rows.push(row);
    }
    if !theta.all_finite() || !phi.all_finite() {
        return Err(Error::Numeric("meta-training produced non-finite parameters".into()));
    }
    Ok(MetaTrainOutput {
        encoder: theta,
        pcn: phi,
        curve,
    })
}
