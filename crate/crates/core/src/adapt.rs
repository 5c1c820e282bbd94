//! Transductive fine-tuning of the encoder on one target task.
//!
//! Every iteration rebuilds prototypes from the current encoder, measures
//! query distances, folds them into a weighted moving average whose weight
//! decays geometrically, turns the smoothed distances into soft
//! pseudo-labels, and takes one gradient step on the encoder. The PCN stays
//! frozen; gradients still pass through it into the encoder.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_neg_values, Tape, Tensor, Var};
use crate::episodes::Task;
use crate::error::{Error, Result};
use crate::losses::{self, argmax, FinetuneTerms, LossBreakdown, LossWeights};
use crate::models::{BoundEncoder, EncoderParams, Optimizer, OptimizerKind, PcnParams};
use crate::numfmt::f17;
use crate::prototypes::{build_prototypes, PrototypeMethod};
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub iters: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub alpha0: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub lambda_dis: f64,
    pub lambda_coh: f64,
    /// Centroids per class when the shot count exceeds the PCN width; must
    /// equal the checkpoint's `k_in`.
    pub cluster_k: usize,
    /// Use `alpha0` itself at the first iteration instead of `gamma·alpha0`.
    pub alpha_first: bool,
    pub use_pcn: bool,
    pub use_ce_support: bool,
    pub use_ce_transductive: bool,
    /// Smooth distances across iterations; when off, pseudo-labels come from
    /// the current iteration's distances alone.
    pub use_wma: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            iters: 100,
            lr: 1e-2,
            optimizer: OptimizerKind::Sgd,
            weight_decay: 0.0,
            alpha0: 0.5,
            gamma: 0.99,
            epsilon: 0.4,
            lambda_dis: 0.1,
            lambda_coh: 1e-3,
            cluster_k: 5,
            alpha_first: false,
            use_pcn: true,
            use_ce_support: true,
            use_ce_transductive: true,
            use_wma: true,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, rule: &str| Err(Error::config(format!("adapt.{key} {rule}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr", "must be a finite number > 0");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail("weight_decay", "must be a finite number >= 0");
        }
        if !(self.alpha0 > 0.0 && self.alpha0 <= 1.0) {
            return fail("alpha0", "must lie in (0, 1]");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return fail("gamma", "must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return fail("epsilon", "must lie in [0, 1]");
        }
        if !(self.lambda_dis >= 0.0 && self.lambda_dis.is_finite()) {
            return fail("lambda_dis", "must be a finite number >= 0");
        }
        if !(self.lambda_coh >= 0.0 && self.lambda_coh.is_finite()) {
            return fail("lambda_coh", "must be a finite number >= 0");
        }
        if self.cluster_k == 0 {
            return fail("cluster_k", "must be >= 1");
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_dis: self.lambda_dis,
            lambda_coh: self.lambda_coh,
        }
    }

    /// Prototype construction for a `k_shot` task with a PCN of width `k_in`.
    pub fn prototype_method(&self, k_shot: usize, k_in: usize) -> Result<PrototypeMethod> {
        if !self.use_pcn {
            return Ok(PrototypeMethod::Mean);
        }
        let m = PrototypeMethod::for_shots(k_shot, k_in)?;
        if m == PrototypeMethod::ClusterPcn && self.cluster_k != k_in {
            return Err(Error::config(format!(
                "adapt.cluster_k = {} but the PCN takes {k_in} embeddings per class",
                self.cluster_k
            )));
        }
        Ok(m)
    }
}

/// `γ·α_prev`.
pub fn anneal_alpha(alpha_prev: f64, gamma: f64) -> f64 {
    gamma * alpha_prev
}

/// Running distance averages for every query of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct WmaState {
    pub h_tilde: Vec<Vec<f64>>,
    pub alpha: f64,
    pub iter: usize,
}

impl WmaState {
    /// Zero averages; `alpha` holds `alpha0` until the first annealing.
    pub fn new(n_queries: usize, n_way: usize, alpha0: f64) -> Self {
        Self {
            h_tilde: vec![vec![0.0; n_way]; n_queries],
            alpha: alpha0,
            iter: 0,
        }
    }

    /// Advances the iteration counter and sets the weight for it. With
    /// `alpha_first` the first iteration keeps `alpha0`.
    pub fn begin_iteration(&mut self, gamma: f64, alpha_first: bool) {
        if !(alpha_first && self.iter == 0) {
            self.alpha = anneal_alpha(self.alpha, gamma);
        }
        self.iter += 1;
    }

    /// `h̃ ← α·h + (1−α)·h̃` for query `q`.
    pub fn update(&mut self, q: usize, h: &[f64]) -> Result<()> {
        let row = self
            .h_tilde
            .get_mut(q)
            .ok_or_else(|| Error::dim(format!("query {q} out of range")))?;
        if row.len() != h.len() {
            return Err(Error::dim(format!(
                "distance vector has {} entries, expected {}",
                h.len(),
                row.len()
            )));
        }
        let a = self.alpha;
        for (t, &x) in row.iter_mut().zip(h) {
            *t = a * x + (1.0 - a) * *t;
        }
        Ok(())
    }

    /// Soft pseudo-labels: softmax of the negated running distances.
    pub fn pseudo_labels(&self) -> Vec<Vec<f64>> {
        self.h_tilde.iter().map(|h| softmax_neg_values(h)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub alpha: f64,
    pub n_confident: usize,
    pub ce_support: f64,
    pub ce_transductive: f64,
    pub l_dis: f64,
    pub l_coh_ft: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub records: Vec<IterationRecord>,
}

impl Trace {
    pub const CSV_HEADER: &'static str = "iter,alpha,n_confident,ce_support,ce_transductive,l_dis,l_coh_ft,total";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.iter,
                f17(r.alpha),
                r.n_confident,
                f17(r.ce_support),
                f17(r.ce_transductive),
                f17(r.l_dis),
                f17(r.l_coh_ft),
                f17(r.total)
            );
        }
        out
    }
}

/// State visible to an observer after the pseudo-labels of an iteration are
/// formed and before the gradient step.
#[derive(Debug)]
pub struct IterationSnapshot<'a> {
    pub iter: usize,
    pub alpha: f64,
    /// Current distance vectors, one per query.
    pub h: &'a [Vec<f64>],
    pub h_tilde: &'a [Vec<f64>],
    pub pseudo_labels: &'a [Vec<f64>],
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptOutcome {
    pub encoder: EncoderParams,
    /// Class index per query from the final pseudo-labels (or from plain
    /// prototype distances when no iteration ran).
    pub predictions: Vec<usize>,
    pub final_probs: Vec<Vec<f64>>,
    /// Predictions of the unadapted encoder.
    pub initial_predictions: Vec<usize>,
    pub trace: Trace,
}

fn constant_matrix(tape: &mut Tape, rows: &[&[f64]]) -> Result<Var> {
    let cols = rows.first().map_or(0, |r| r.len());
    let mut data = Vec::with_capacity(rows.len() * cols);
    for r in rows {
        if r.len() != cols {
            return Err(Error::dim("input vectors have differing lengths"));
        }
        data.extend_from_slice(r);
    }
    Ok(tape.constant(Tensor::matrix(rows.len(), cols, data)?))
}

/// Embeds `inputs` as one batch and returns a row `Var` per input.
pub fn embed_rows(tape: &mut Tape, encoder: &BoundEncoder, inputs: &[&[f64]]) -> Result<Vec<Var>> {
    let x = constant_matrix(tape, inputs)?;
    let e = encoder.forward(tape, x)?;
    (0..inputs.len()).map(|i| tape.row(e, i)).collect()
}

/// Groups support embeddings by class, in support order.
pub fn group_by_class(embeddings: &[Var], labels: &[usize], n_way: usize) -> Vec<Vec<Var>> {
    let mut groups = vec![Vec::new(); n_way];
    for (&e, &y) in embeddings.iter().zip(labels) {
        groups[y].push(e);
    }
    groups
}

struct Forward {
    support: Vec<Var>,
    protos: Vec<Var>,
    h: Vec<Var>,
}

fn forward(
    tape: &mut Tape,
    encoder: &BoundEncoder,
    pcn: &PcnParams,
    task: &Task,
    method: PrototypeMethod,
    cluster_seed: u64,
) -> Result<Forward> {
    let labels: Vec<usize> = task.support.iter().map(|s| s.label).collect();
    let sx: Vec<&[f64]> = task.support.iter().map(|s| s.x.as_slice()).collect();
    let support = embed_rows(tape, encoder, &sx)?;
    let groups = group_by_class(&support, &labels, task.n_way);
    let bound_pcn = (method != PrototypeMethod::Mean).then(|| pcn.bind(tape, false));
    let protos = build_prototypes(tape, &groups, method, bound_pcn.as_ref(), cluster_seed)?;
    let qx: Vec<&[f64]> = task.query.iter().map(Vec::as_slice).collect();
    let query = embed_rows(tape, encoder, &qx)?;
    let h = query
        .iter()
        .map(|&e| losses::distance_vector(tape, e, &protos))
        .collect::<Result<Vec<_>>>()?;
    Ok(Forward { support, protos, h })
}

fn cluster_seed(seed: u64, iter: usize) -> u64 {
    derive_seed(seed, "finetune-cluster", iter as u64)
}

/// [`finetune_episode_observed`] without an observer.
pub fn finetune_episode(
    encoder: &EncoderParams,
    pcn: &PcnParams,
    task: &Task,
    cfg: &AdaptConfig,
    seed: u64,
) -> Result<AdaptOutcome> {
    finetune_episode_observed(encoder, pcn, task, cfg, seed, &mut |_| {})
}

/// Fine-tunes a copy of `encoder` on `task` and predicts its queries.
///
/// `seed` drives clustering and appears in error messages so a failing task
/// can be replayed. The PCN is never modified.
pub fn finetune_episode_observed(
    encoder: &EncoderParams,
    pcn: &PcnParams,
    task: &Task,
    cfg: &AdaptConfig,
    seed: u64,
    observer: &mut dyn FnMut(&IterationSnapshot<'_>),
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    if task.query.is_empty() {
        return Err(Error::arg("task has no query instances"));
    }
    let method = cfg.prototype_method(task.k_shot, pcn.k_in)?;
    let labels: Vec<usize> = task.support.iter().map(|s| s.label).collect();
    let terms = FinetuneTerms {
        ce_support: cfg.use_ce_support,
        ce_transductive: cfg.use_ce_transductive,
        epsilon: cfg.epsilon,
        weights: cfg.weights(),
    };

    let initial_probs = {
        let mut tape = Tape::new();
        let enc = encoder.bind(&mut tape, false);
        let f = forward(&mut tape, &enc, pcn, task, method, cluster_seed(seed, 0))?;
        f.h.iter()
            .map(|&h| softmax_neg_values(tape.value(h).data()))
            .collect::<Vec<_>>()
    };
    let initial_predictions: Vec<usize> = initial_probs.iter().map(|p| argmax(p)).collect();

    let mut theta = encoder.clone();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.weight_decay);
    let mut wma = WmaState::new(task.query.len(), task.n_way, cfg.alpha0);
    let mut trace = Trace::default();
    let mut final_probs = initial_probs;

    for _ in 0..cfg.iters {
        let mut tape = Tape::new();
        let enc = theta.bind(&mut tape, true);
        let f = forward(&mut tape, &enc, pcn, task, method, cluster_seed(seed, wma.iter + 1))?;
        let h: Vec<Vec<f64>> = f.h.iter().map(|&v| tape.value(v).data().to_vec()).collect();

        wma.begin_iteration(cfg.gamma, cfg.alpha_first);
        let pseudo = if cfg.use_wma {
            for (q, hq) in h.iter().enumerate() {
                wma.update(q, hq)?;
            }
            wma.pseudo_labels()
        } else {
            h.iter().map(|hq| softmax_neg_values(hq)).collect()
        };

        let probs: Vec<Var> = f.h.iter().map(|&v| tape.softmax_neg(v)).collect();
        let (total, b) = losses::loss_finetune(&mut tape, &f.protos, &f.support, &labels, &probs, &pseudo, terms)?;
        let iter = wma.iter;
        if !b.total.is_finite() {
            return Err(Error::Numeric(format!(
                "fine-tuning loss is {} at iteration {iter} (episode seed {seed})",
                b.total
            )));
        }
        observer(&IterationSnapshot {
            iter,
            alpha: wma.alpha,
            h: &h,
            h_tilde: &wma.h_tilde,
            pseudo_labels: &pseudo,
            loss: b,
        });
        trace.records.push(IterationRecord {
            iter,
            alpha: wma.alpha,
            n_confident: b.n_confident,
            ce_support: b.ce_support,
            ce_transductive: b.ce_transductive,
            l_dis: b.l_dis,
            l_coh_ft: b.l_coh,
            total: b.total,
        });

        tape.backward(total)?;
        let grads = enc.grads(&tape);
        opt.step(theta.slots_mut(), &grads)
            .map_err(|e| Error::Numeric(format!("{e} at iteration {iter} (episode seed {seed})")))?;
        final_probs = pseudo;
    }

    Ok(AdaptOutcome {
        encoder: theta,
        predictions: final_probs.iter().map(|p| argmax(p)).collect(),
        final_probs,
        initial_predictions,
        trace,
    })
}
