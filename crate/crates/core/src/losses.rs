//! Classification, discriminative, cohesive and transductive loss terms, and
//! the meta-training and fine-tuning composites built from them.
//!
//! All terms are sums over instances, not means. Composite totals are
//! accumulated left to right in the order the parts appear in
//! [`LossBreakdown`], and a term whose weight is zero (or whose gate admits
//! no query) is left out of the graph entirely.

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_neg_values, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Floor applied to probabilities before taking logs.
pub const LOG_FLOOR: f64 = 1e-30;
/// Added to the pairwise distance sum in the discriminative loss.
pub const DIS_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_dis: f64,
    pub lambda_coh: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_dis: 0.1,
            lambda_coh: 1e-3,
        }
    }
}

/// Values of every loss part. Parts that were not computed are zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_query: f64,
    pub ce_support: f64,
    pub ce_transductive: f64,
    pub l_dis: f64,
    pub l_coh: f64,
    pub total: f64,
    pub n_confident: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared distances from `embedding` to every prototype, by class index.
pub fn distance_vector_values(embedding: &[f64], prototypes: &[Vec<f64>]) -> Vec<f64> {
    prototypes.iter().map(|p| sq_dist(embedding, p)).collect()
}

pub fn class_probs_values(embedding: &[f64], prototypes: &[Vec<f64>]) -> Vec<f64> {
    softmax_neg_values(&distance_vector_values(embedding, prototypes))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Squared distances `[N]` from one embedding to each prototype.
pub fn distance_vector(tape: &mut Tape, embedding: Var, prototypes: &[Var]) -> Result<Var> {
    let d = prototypes
        .iter()
        .map(|&p| tape.sq_euclidean(embedding, p))
        .collect::<Result<Vec<_>>>()?;
    tape.concat(&d)
}

pub fn class_probs(tape: &mut Tape, embedding: Var, prototypes: &[Var]) -> Result<Var> {
    let h = distance_vector(tape, embedding, prototypes)?;
    Ok(tape.softmax_neg(h))
}

/// `−Σ_j t_j·log max(p_j, LOG_FLOOR)` for one probability row.
fn soft_ce_row(tape: &mut Tape, probs: Var, target: Vec<f64>) -> Result<Var> {
    let n = tape.value(probs).numel();
    if target.len() != n {
        return Err(Error::dim(format!(
            "target has {} entries for {n} classes",
            target.len()
        )));
    }
    let t = tape.constant(Tensor::vector(target));
    let lp = tape.log_clamped(probs, LOG_FLOOR);
    let prod = tape.mul(t, lp)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, -1.0))
}

/// Summed cross-entropy of probability rows against hard labels.
pub fn ce_labeled(tape: &mut Tape, probs: &[Var], labels: &[usize]) -> Result<Var> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::dim(format!(
            "{} probability rows for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let rows = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let n = tape.value(p).numel();
            if y >= n {
                return Err(Error::dim(format!("label {y} out of range for {n} classes")));
            }
            let mut onehot = vec![0.0; n];
            onehot[y] = 1.0;
            soft_ce_row(tape, p, onehot)
        })
        .collect::<Result<Vec<_>>>()?;
    tape.add_n(&rows)
}

/// `1 / (Σ_{i<j} d(p_i, p_j) + DIS_GUARD)`.
pub fn l_dis(tape: &mut Tape, prototypes: &[Var]) -> Result<Var> {
    let n = prototypes.len();
    if n < 2 {
        return Err(Error::arg("discriminative loss needs at least two prototypes"));
    }
    let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            pairs.push(tape.sq_euclidean(prototypes[i], prototypes[j])?);
        }
    }
    let s = tape.add_n(&pairs)?;
    let g = tape.add_const(s, DIS_GUARD);
    Ok(tape.recip(g))
}

/// `Σ_x d(p_{label(x)}, f(x))` over labelled embeddings.
pub fn l_coh(tape: &mut Tape, prototypes: &[Var], embeddings: &[Var], labels: &[usize]) -> Result<Var> {
    if embeddings.len() != labels.len() || embeddings.is_empty() {
        return Err(Error::dim(format!(
            "{} embeddings for {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    let terms = embeddings
        .iter()
        .zip(labels)
        .map(|(&e, &y)| {
            let p = *prototypes
                .get(y)
                .ok_or_else(|| Error::dim(format!("label {y} has no prototype")))?;
            tape.sq_euclidean(p, e)
        })
        .collect::<Result<Vec<_>>>()?;
    tape.add_n(&terms)
}

/// Soft cross-entropy against constant targets for every query whose
/// largest target probability strictly exceeds `epsilon`. Returns `None`
/// when no query passes the gate.
pub fn ce_transductive(
    tape: &mut Tape,
    probs: &[Var],
    targets: &[Vec<f64>],
    epsilon: f64,
) -> Result<(Option<Var>, usize)> {
    if probs.len() != targets.len() {
        return Err(Error::dim(format!(
            "{} probability rows for {} pseudo-label rows",
            probs.len(),
            targets.len()
        )));
    }
    let mut rows = Vec::new();
    for (&p, t) in probs.iter().zip(targets) {
        let conf = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if conf > epsilon {
            rows.push(soft_ce_row(tape, p, t.clone())?);
        }
    }
    let n = rows.len();
    Ok(((n > 0).then(|| tape.add_n(&rows)).transpose()?, n))
}

fn weighted(tape: &mut Tape, parts: &mut Vec<Var>, term: Var, weight: f64) {
    if weight != 0.0 {
        let v = if weight == 1.0 { term } else { tape.scale(term, weight) };
        parts.push(v);
    }
}

fn total_of(tape: &mut Tape, parts: &[Var]) -> Var {
    let mut it = parts.iter().copied();
    match it.next() {
        None => tape.constant(Tensor::scalar(0.0)),
        Some(first) => it.fold(first, |acc, p| tape.add(acc, p).expect("scalars")),
    }
}

/// Meta-training objective: query CE plus weighted discriminative and
/// query-side cohesive terms.
pub fn loss_train(
    tape: &mut Tape,
    prototypes: &[Var],
    query_embeddings: &[Var],
    query_labels: &[usize],
    weights: LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let probs = query_embeddings
        .iter()
        .map(|&e| class_probs(tape, e, prototypes))
        .collect::<Result<Vec<_>>>()?;
    let ce = ce_labeled(tape, &probs, query_labels)?;
    let ld = l_dis(tape, prototypes)?;
    let lc = l_coh(tape, prototypes, query_embeddings, query_labels)?;
    let mut parts = vec![ce];
    weighted(tape, &mut parts, ld, weights.lambda_dis);
    weighted(tape, &mut parts, lc, weights.lambda_coh);
    let total = total_of(tape, &parts);
    let b = LossBreakdown {
        ce_query: tape.scalar(ce),
        l_dis: tape.scalar(ld),
        l_coh: tape.scalar(lc),
        total: tape.scalar(total),
        ..LossBreakdown::default()
    };
    Ok((total, b))
}

/// Which optional parts of the fine-tuning objective are active.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneTerms {
    pub ce_support: bool,
    pub ce_transductive: bool,
    pub epsilon: f64,
    pub weights: LossWeights,
}

/// Fine-tuning objective: support CE, gated transductive CE on the queries,
/// and weighted discriminative and support-side cohesive terms.
///
/// `query_probs` are current-model probabilities and `pseudo_labels` the
/// constant soft targets, one row per query.
pub fn loss_finetune(
    tape: &mut Tape,
    prototypes: &[Var],
    support_embeddings: &[Var],
    support_labels: &[usize],
    query_probs: &[Var],
    pseudo_labels: &[Vec<f64>],
    terms: FinetuneTerms,
) -> Result<(Var, LossBreakdown)> {
    let mut parts = Vec::with_capacity(4);
    let mut b = LossBreakdown::default();
    if terms.ce_support {
        let probs = support_embeddings
            .iter()
            .map(|&e| class_probs(tape, e, prototypes))
            .collect::<Result<Vec<_>>>()?;
        let ce = ce_labeled(tape, &probs, support_labels)?;
        b.ce_support = tape.scalar(ce);
        parts.push(ce);
    }
    if terms.ce_transductive {
        let (tr, n) = ce_transductive(tape, query_probs, pseudo_labels, terms.epsilon)?;
        b.n_confident = n;
        if let Some(tr) = tr {
            b.ce_transductive = tape.scalar(tr);
            parts.push(tr);
        }
    }
    let ld = l_dis(tape, prototypes)?;
    b.l_dis = tape.scalar(ld);
    weighted(tape, &mut parts, ld, terms.weights.lambda_dis);
    let lc = l_coh(tape, prototypes, support_embeddings, support_labels)?;
    b.l_coh = tape.scalar(lc);
    weighted(tape, &mut parts, lc, terms.weights.lambda_coh);
    let total = total_of(tape, &parts);
    b.total = tape.scalar(total);
    Ok((total, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vecs(tape: &mut Tape, v: &[&[f64]]) -> Vec<Var> {
        v.iter().map(|x| tape.constant(Tensor::vector(x.to_vec()))).collect()
    }

    #[test]
    fn probs_from_distances_zero_and_ln3() {
        let p = softmax_neg_values(&[0.0, 3f64.ln()]);
        assert!((p[0] - 0.75).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn equidistant_embedding_is_uniform() {
        let p = class_probs_values(&[0.0, 0.0], &[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]);
        assert!(p.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn uniform_predictions_give_q_ln_n() {
        let mut tape = Tape::new();
        let probs: Vec<Var> = (0..75).map(|_| tape.constant(Tensor::vector(vec![0.2; 5]))).collect();
        let labels: Vec<usize> = (0..75).map(|i| i % 5).collect();
        let ce = ce_labeled(&mut tape, &probs, &labels).unwrap();
        assert!((tape.scalar(ce) - 75.0 * 5f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn l_dis_examples() {
        let mut tape = Tape::new();
        let two = vecs(&mut tape, &[&[0.0], &[1.0]]);
        let v = l_dis(&mut tape, &two).unwrap();
        assert!((tape.scalar(v) - 1.0).abs() < 1e-11);
        let three = vecs(&mut tape, &[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let v = l_dis(&mut tape, &three).unwrap();
        assert!((tape.scalar(v) - 0.25).abs() < 1e-12);
        let same = vecs(&mut tape, &[&[1.0, 1.0], &[1.0, 1.0]]);
        let v = l_dis(&mut tape, &same).unwrap();
        assert_eq!(tape.scalar(v), 1.0 / DIS_GUARD);
        let one = vecs(&mut tape, &[&[1.0]]);
        assert!(l_dis(&mut tape, &one).is_err());
    }

    #[test]
    fn l_coh_single_offset() {
        let mut tape = Tape::new();
        let protos = vecs(&mut tape, &[&[0.0, 0.0], &[5.0, 5.0]]);
        let embs = vecs(&mut tape, &[&[2.0, 0.0], &[5.0, 5.0]]);
        let v = l_coh(&mut tape, &protos, &embs, &[0, 1]).unwrap();
        assert_eq!(tape.scalar(v), 4.0);
    }

    #[test]
    fn transductive_gate_is_strict() {
        let mut tape = Tape::new();
        let probs = vecs(&mut tape, &[&[0.5, 0.5], &[0.9, 0.1]]);
        let targets = vec![vec![1.0, 0.0], vec![0.6, 0.4]];
        let (v, n) = ce_transductive(&mut tape, &probs, &targets, 1.0).unwrap();
        assert!(v.is_none() && n == 0);
        let (v, n) = ce_transductive(&mut tape, &probs, &targets, 0.0).unwrap();
        assert_eq!(n, 2);
        let expected = -(0.5f64.ln()) - (0.6 * 0.9f64.ln() + 0.4 * 0.1f64.ln());
        assert!((tape.scalar(v.unwrap()) - expected).abs() < 1e-12);
        let (_, n) = ce_transductive(&mut tape, &probs, &targets, 0.6).unwrap();
        assert_eq!(n, 1);
    }

    #[test]
    fn zero_weights_reduce_to_query_ce() {
        let mut tape = Tape::new();
        let protos = vecs(&mut tape, &[&[0.0, 0.0], &[1.0, 1.0]]);
        let q = vecs(&mut tape, &[&[0.1, 0.0], &[0.8, 1.2]]);
        let w = LossWeights {
            lambda_dis: 0.0,
            lambda_coh: 0.0,
        };
        let (t, b) = loss_train(&mut tape, &protos, &q, &[0, 1], w).unwrap();
        assert_eq!(tape.scalar(t), b.ce_query);
        let (_, b) = loss_train(&mut tape, &protos, &q, &[0, 1], LossWeights::default()).unwrap();
        assert_eq!(b.total, b.ce_query + 0.1 * b.l_dis + 1e-3 * b.l_coh);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[1.0]), 0);
    }
}
