//! Finite-difference checks of every loss term on small seeded episodes.
//!
//! Each toy episode is 2-way 2-shot with three queries per class, a 3→4→3
//! encoder and a two-input PCN, so every coordinate of every parameter can
//! be perturbed cheaply.
//!
//! The composite objectives are differentiated through the whole network.
//! Single terms are checked against the prototypes and embeddings they
//! consume, drawn at random: through the network, `l_dis` is exactly
//! invariant to shifts of the output biases, and those coordinates have a
//! true gradient of zero that central differences only resolve to rounding
//! noise of order |loss|·1e-11.

use crate::adapt::{embed_rows, group_by_class, WmaState};
use crate::autodiff::{grad_check, GradCheckReport, Tape, Tensor, Var};
use crate::episodes::{make_benchmark, BenchmarkSpec, Episode};
use crate::error::Result;
use crate::losses::{self, FinetuneTerms, LossWeights};
use crate::models::{BoundEncoder, BoundPcn, EncoderParams, ModelConfig, PcnParams};
use crate::prototypes::pcn_prototypes;
use crate::seed::{derive_rng, derive_seed};

use rand::Rng;
use rand_distr::StandardNormal;

/// Central-difference step used by the suite.
pub const STEP: f64 = 1e-5;
/// Largest acceptable relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    CeQuery,
    Dis,
    CohQuery,
    Train,
    CeTransductive,
    CohSupport,
    Finetune,
}

impl LossTerm {
    pub const ALL: [LossTerm; 7] = [
        LossTerm::CeQuery,
        LossTerm::Dis,
        LossTerm::CohQuery,
        LossTerm::Train,
        LossTerm::CeTransductive,
        LossTerm::CohSupport,
        LossTerm::Finetune,
    ];

    pub fn id(self) -> &'static str {
        match self {
            LossTerm::CeQuery => "ce_query",
            LossTerm::Dis => "l_dis",
            LossTerm::CohQuery => "l_coh_query",
            LossTerm::Train => "loss_train",
            LossTerm::CeTransductive => "ce_transductive",
            LossTerm::CohSupport => "l_coh_support",
            LossTerm::Finetune => "loss_finetune",
        }
    }

    /// Composite objectives are checked against every network parameter;
    /// single terms against the prototypes and embeddings they consume.
    pub fn is_composite(self) -> bool {
        matches!(self, LossTerm::Train | LossTerm::Finetune)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermReport {
    pub term: LossTerm,
    pub max_rel_error: f64,
    /// Episode index holding the worst error.
    pub worst_episode: usize,
    pub coordinates: usize,
}

impl TermReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// A toy episode with freshly initialized parameters, plus random
/// prototype, support and query tensors for the single-term checks.
pub struct ToyCase {
    pub episode: Episode,
    pub encoder: EncoderParams,
    pub pcn: PcnParams,
    pub inputs: Vec<Tensor>,
}

/// Smallest |pre-activation| a toy case may have at any ReLU, so that no
/// finite-difference probe crosses a kink.
pub const KINK_MARGIN: f64 = 1e-3;

/// Builds the toy case for `seed`. Biases are drawn at random (rather than
/// zero) and the draw is repeated, deterministically, until every ReLU input
/// is at least [`KINK_MARGIN`] away from zero.
pub fn toy_case(seed: u64) -> Result<ToyCase> {
    let spec = BenchmarkSpec {
        input_dim: 3,
        signal_dims: 3,
        source_classes: 4,
        target_classes: 2,
        class_spread: 1.5,
        ..BenchmarkSpec::default()
    };
    let (source, _) = make_benchmark(&spec, derive_seed(seed, "toy-bench", 0))?;
    let episode = source.sample_episode(2, 2, 3, 0)?;
    let model = ModelConfig {
        hidden: vec![4],
        embed_dim: 3,
        pcn_bias: true,
    };
    for attempt in 0.. {
        let (mut encoder, mut pcn) = model.init(3, 2, derive_seed(seed, "toy-init", attempt));
        let mut rng = derive_rng(seed, "toy-bias", attempt);
        for slot in encoder
            .layers
            .iter_mut()
            .map(|l| l.bias.data_mut())
            .chain(pcn.bias.as_mut().map(|b| b.data_mut()))
        {
            slot.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        }
        let case = ToyCase {
            episode: episode.clone(),
            encoder,
            pcn,
            inputs: random_inputs(&episode, 3, derive_seed(seed, "toy-inputs", 0)),
        };
        if relu_margin(&case)? >= KINK_MARGIN {
            return Ok(case);
        }
    }
    unreachable!("the attempt counter is unbounded")
}

/// Prototypes, then support and query embeddings, each entry N(0, 0.5²).
fn random_inputs(episode: &Episode, dim: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = derive_rng(seed, "toy-inputs", 0);
    let count = episode.n_way + episode.support.len() + episode.query.len();
    (0..count)
        .map(|_| Tensor::vector((0..dim).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect()))
        .collect()
}

/// Smallest |input| over every ReLU evaluated by the toy case's forward pass.
/// A hidden unit that is inactive on every support sample or on every query,
/// or a PCN unit inactive for every class, counts as margin zero: its
/// weights would get an exactly zero gradient.
pub fn relu_margin(case: &ToyCase) -> Result<f64> {
    let mut margin = f64::INFINITY;
    let layers = &case.encoder.layers;
    let embed = |x: &[f64], margin: &mut f64, alive: &mut Vec<Vec<bool>>| -> Vec<f64> {
        let mut h = x.to_vec();
        for (i, l) in layers.iter().enumerate() {
            let (rows, cols) = (l.weight.rows(), l.weight.cols());
            let mut z = l.bias.data().to_vec();
            for r in 0..rows {
                for c in 0..cols {
                    z[c] += h[r] * l.weight.data()[r * cols + c];
                }
            }
            if i + 1 < layers.len() {
                z.iter().for_each(|v| *margin = margin.min(v.abs()));
                for (a, v) in alive[i].iter_mut().zip(&z) {
                    *a |= *v > 0.0;
                }
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = z;
        }
        h
    };
    let ep = &case.episode;
    let fresh = || -> Vec<Vec<bool>> { layers.iter().map(|l| vec![false; l.weight.cols()]).collect() };
    let (mut alive_s, mut alive_q) = (fresh(), fresh());
    let support: Vec<Vec<f64>> = ep
        .support
        .iter()
        .map(|s| embed(&s.x, &mut margin, &mut alive_s))
        .collect();
    for s in &ep.query {
        embed(&s.x, &mut margin, &mut alive_q);
    }
    let hidden = layers.len() - 1;
    if alive_s[..hidden].iter().chain(&alive_q[..hidden]).flatten().any(|a| !a) {
        return Ok(0.0);
    }
    let mut pcn_alive = vec![false; case.pcn.weight.cols()];
    for n in 0..ep.n_way {
        let cat: Vec<f64> = ep
            .support
            .iter()
            .zip(&support)
            .filter(|(s, _)| s.label == n)
            .flat_map(|(_, e)| e.iter().copied())
            .collect();
        let (rows, cols) = (case.pcn.weight.rows(), case.pcn.weight.cols());
        let mut z = case.pcn.bias.as_ref().map_or(vec![0.0; cols], |b| b.data().to_vec());
        for r in 0..rows {
            for c in 0..cols {
                z[c] += cat[r] * case.pcn.weight.data()[r * cols + c];
            }
        }
        z.iter().for_each(|v| margin = margin.min(v.abs()));
        for (a, v) in pcn_alive.iter_mut().zip(&z) {
            *a |= *v > 0.0;
        }
    }
    if pcn_alive.contains(&false) {
        return Ok(0.0);
    }
    Ok(margin)
}

fn params_of(case: &ToyCase) -> Vec<Tensor> {
    let mut out = Vec::new();
    for l in &case.encoder.layers {
        out.push(l.weight.clone());
        out.push(l.bias.clone());
    }
    out.push(case.pcn.weight.clone());
    out.extend(case.pcn.bias.clone());
    out
}

struct Recorded {
    support: Vec<Var>,
    query: Vec<Var>,
    protos: Vec<Var>,
}

fn record(tape: &mut Tape, vars: &[Var], case: &ToyCase) -> Result<Recorded> {
    let n_enc = case.encoder.layers.len() * 2;
    let enc = BoundEncoder::from_vars(&vars[..n_enc])?;
    let pcn = BoundPcn::from_vars(vars[n_enc], vars.get(n_enc + 1).copied(), case.pcn.k_in, case.pcn.d);
    let ep = &case.episode;
    let sx: Vec<&[f64]> = ep.support.iter().map(|s| s.x.as_slice()).collect();
    let sy: Vec<usize> = ep.support.iter().map(|s| s.label).collect();
    let support = embed_rows(tape, &enc, &sx)?;
    let groups = group_by_class(&support, &sy, ep.n_way);
    let protos = pcn_prototypes(tape, &groups, &pcn)?;
    let qx: Vec<&[f64]> = ep.query.iter().map(|s| s.x.as_slice()).collect();
    let query = embed_rows(tape, &enc, &qx)?;
    Ok(Recorded { support, query, protos })
}

/// Pseudo-labels after one moving-average step from the recorded values.
fn pseudo_labels(tape: &mut Tape, r: &Recorded, n_way: usize) -> Result<Vec<Vec<f64>>> {
    let mut wma = WmaState::new(r.query.len(), n_way, 0.5);
    wma.begin_iteration(0.99, false);
    for (q, &e) in r.query.iter().enumerate() {
        let h = losses::distance_vector(tape, e, &r.protos)?;
        let hv = tape.value(h).data().to_vec();
        wma.update(q, &hv)?;
    }
    Ok(wma.pseudo_labels())
}

fn split_inputs(vars: &[Var], case: &ToyCase) -> Recorded {
    let (n, s) = (case.episode.n_way, case.episode.support.len());
    Recorded {
        protos: vars[..n].to_vec(),
        support: vars[n..n + s].to_vec(),
        query: vars[n + s..].to_vec(),
    }
}

fn term_loss(tape: &mut Tape, r: &Recorded, case: &ToyCase, term: LossTerm, pseudo: &[Vec<f64>]) -> Result<Var> {
    let qy = case.episode.query_labels();
    let sy: Vec<usize> = case.episode.support.iter().map(|s| s.label).collect();
    let weights = LossWeights::default();
    let query_probs = |tape: &mut Tape| -> Result<Vec<Var>> {
        r.query
            .iter()
            .map(|&e| losses::class_probs(tape, e, &r.protos))
            .collect()
    };
    match term {
        LossTerm::CeQuery => {
            let p = query_probs(tape)?;
            losses::ce_labeled(tape, &p, &qy)
        }
        LossTerm::Dis => losses::l_dis(tape, &r.protos),
        LossTerm::CohQuery => losses::l_coh(tape, &r.protos, &r.query, &qy),
        LossTerm::Train => Ok(losses::loss_train(tape, &r.protos, &r.query, &qy, weights)?.0),
        LossTerm::CeTransductive => {
            let p = query_probs(tape)?;
            let (v, _) = losses::ce_transductive(tape, &p, pseudo, 0.0)?;
            Ok(v.expect("every query passes a zero threshold"))
        }
        LossTerm::CohSupport => losses::l_coh(tape, &r.protos, &r.support, &sy),
        LossTerm::Finetune => {
            let p = query_probs(tape)?;
            let terms = FinetuneTerms {
                ce_support: true,
                ce_transductive: true,
                epsilon: 0.0,
                weights,
            };
            Ok(losses::loss_finetune(tape, &r.protos, &r.support, &sy, &p, pseudo, terms)?.0)
        }
    }
}

/// Worst relative error of `term` on one toy case.
pub fn check_term(case: &ToyCase, term: LossTerm) -> Result<GradCheckReport> {
    let n_way = case.episode.n_way;
    if term.is_composite() {
        let params = params_of(case);
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
        let r = record(&mut tape, &vars, case)?;
        let pseudo = pseudo_labels(&mut tape, &r, n_way)?;
        return grad_check(
            |tape, vars| {
                let r = record(tape, vars, case)?;
                term_loss(tape, &r, case, term, &pseudo)
            },
            &params,
            STEP,
        );
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|p| tape.constant(p.clone())).collect();
    let pseudo = pseudo_labels(&mut tape, &split_inputs(&vars, case), n_way)?;
    grad_check(
        |tape, vars| term_loss(tape, &split_inputs(vars, case), case, term, &pseudo),
        &case.inputs,
        STEP,
    )
}

/// Checks every loss term on `n_episodes` toy cases seeded from `seed`.
pub fn run(n_episodes: usize, seed: u64) -> Result<Vec<TermReport>> {
    let cases = (0..n_episodes)
        .map(|i| toy_case(derive_seed(seed, "gradcheck", i as u64)))
        .collect::<Result<Vec<_>>>()?;
    LossTerm::ALL
        .iter()
        .map(|&term| {
            let mut rep = TermReport {
                term,
                max_rel_error: 0.0,
                worst_episode: 0,
                coordinates: 0,
            };
            for (i, case) in cases.iter().enumerate() {
                let r = check_term(case, term)?;
                rep.coordinates += r.coordinates;
                if r.max_rel_error > rep.max_rel_error {
                    rep.max_rel_error = r.max_rel_error;
                    rep.worst_episode = i;
                }
            }
            Ok(rep)
        })
        .collect()
}
