//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use appl_core::adapt::{finetune_episode_observed, IterationSnapshot};
use appl_core::autodiff::softmax_neg_values;
use appl_core::gradcheck_suite::{self, TOLERANCE};
use appl_core::harness::{eval_episodes, eval_seed, evaluate, run_ablation};
use appl_core::losses::argmax;
use appl_core::prototypes::cluster_reduce;
use appl_core::seed::{derive_rng, derive_seed};
use appl_core::{
    finetune_episode, pipeline, AblationVariant, AdaptConfig, AdaptOutcome, Checkpoint, Domain, Episode, PcnParams,
    PrototypeSet, RunConfig, Tape, Tensor, WmaState,
};
use rand::seq::SliceRandom;
use rand::Rng;

const DESK_CONFIG: &str = include_str!("../../../configs/desk-5w5s.toml");

// Criterion thresholds.
const GRADCHECK_EPISODES: usize = 20;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(120);
const PROTONET_EPISODES: usize = 100;
const BRIDGE_CLASSES: usize = 50;
const BRIDGE_TOL: f64 = 1e-12;
const ALPHA_ITERS: usize = 1000;
const ALPHA_TOL: f64 = 1e-12;
const WMA_RUNS: usize = 100;
const GATE_EPISODES: usize = 20;
const PERMUTATION_EPISODES: usize = 20;
const MIN_GAIN_OVER_PROTONET: f64 = 0.02;
const MAX_DEFICIT: f64 = 0.005;
const EFFICACY_BUDGET: Duration = Duration::from_secs(30 * 60);
const HIGH_SHOT: usize = 50;
const HIGH_SHOT_K: usize = 5;
const KMEANS_INSTANCES: usize = 50;
const KMEANS_MAX_POINTS: usize = 8;
const KMEANS_MAX_K: usize = 3;
const KMEANS_REL_TOL: f64 = 1e-9;

type Verdict = Result<String, String>;

struct Desk {
    cfg: RunConfig,
    ckpt: Checkpoint,
    target: Domain,
}

impl Desk {
    fn load() -> Self {
        let cfg = RunConfig::from_toml_str(DESK_CONFIG).expect("committed config parses");
        let (ckpt, _) = pipeline::train(&cfg, |_| {}).expect("meta-training on the committed config");
        let (_, target) = pipeline::benchmark(&cfg).expect("benchmark");
        Self { cfg, ckpt, target }
    }

    fn episodes(&self, n: usize) -> Vec<Episode> {
        eval_episodes(&self.target, self.cfg.episode, n, pipeline::eval_root(&self.cfg)).expect("episodes")
    }

    fn seed(&self, i: usize) -> u64 {
        eval_seed(pipeline::eval_root(&self.cfg), i)
    }

    fn finetune(&self, episode: &Episode, cfg: &AdaptConfig, seed: u64) -> AdaptOutcome {
        finetune_episode(&self.ckpt.encoder, &self.ckpt.pcn, &episode.task(), cfg, seed).expect("fine-tuning")
    }
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn outcomes_identical(a: &AdaptOutcome, b: &AdaptOutcome) -> bool {
    let enc = |o: &AdaptOutcome| -> Vec<f64> {
        o.encoder
            .layers
            .iter()
            .flat_map(|l| l.weight.data().iter().chain(l.bias.data()).copied())
            .collect()
    };
    a.predictions == b.predictions
        && a.initial_predictions == b.initial_predictions
        && a.final_probs.len() == b.final_probs.len()
        && a.final_probs.iter().zip(&b.final_probs).all(|(x, y)| same_bits(x, y))
        && a.trace.to_csv() == b.trace.to_csv()
        && same_bits(&enc(a), &enc(b))
}

// 1
fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let reports = gradcheck_suite::run(GRADCHECK_EPISODES, 0).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("at least one term");
    let detail = format!(
        "{} terms x {GRADCHECK_EPISODES} episodes, worst {} {:.2e} (< {TOLERANCE:e}), {:.1} s (< {} s)",
        reports.len(),
        worst.term.id(),
        worst.max_rel_error,
        elapsed.as_secs_f64(),
        GRADCHECK_BUDGET.as_secs()
    );
    if reports.iter().all(|r| r.passed()) && elapsed < GRADCHECK_BUDGET {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Straight-line prototypical network: hand-written MLP forward and
/// backward passes, mean prototypes, squared distances and plain SGD on the
/// summed support cross-entropy. Shares no code with the library's tape.
mod protonet_oracle {
    use appl_core::EncoderParams;

    pub struct Mlp {
        /// `(weight [in×out] row-major, bias, in, out)` per layer.
        layers: Vec<(Vec<f64>, Vec<f64>, usize, usize)>,
    }

    struct Activations {
        /// Layer inputs, then the final output.
        inputs: Vec<Vec<f64>>,
        /// Pre-activations per layer.
        pre: Vec<Vec<f64>>,
    }

    impl Mlp {
        pub fn from_params(p: &EncoderParams) -> Self {
            let layers = p
                .layers
                .iter()
                .map(|l| {
                    let (i, o) = (l.weight.rows(), l.weight.cols());
                    (l.weight.data().to_vec(), l.bias.data().to_vec(), i, o)
                })
                .collect();
            Self { layers }
        }

        fn run(&self, x: &[f64]) -> Activations {
            let mut inputs = vec![x.to_vec()];
            let mut pre = Vec::new();
            let last = self.layers.len() - 1;
            for (li, (w, b, n_in, n_out)) in self.layers.iter().enumerate() {
                let a = inputs.last().unwrap();
                let mut z = b.clone();
                for (j, zj) in z.iter_mut().enumerate() {
                    for i in 0..*n_in {
                        *zj += a[i] * w[i * n_out + j];
                    }
                }
                let out = if li == last {
                    z.clone()
                } else {
                    z.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
                };
                pre.push(z);
                inputs.push(out);
            }
            Activations { inputs, pre }
        }

        fn embed(&self, x: &[f64]) -> Vec<f64> {
            self.run(x).inputs.pop().unwrap()
        }

        fn backprop(&self, act: &Activations, upstream: &[f64], grads: &mut [(Vec<f64>, Vec<f64>)]) {
            let mut delta = upstream.to_vec();
            for li in (0..self.layers.len()).rev() {
                let (w, _, n_in, n_out) = &self.layers[li];
                let a = &act.inputs[li];
                let (gw, gb) = &mut grads[li];
                for i in 0..*n_in {
                    for j in 0..*n_out {
                        gw[i * n_out + j] += a[i] * delta[j];
                    }
                }
                for j in 0..*n_out {
                    gb[j] += delta[j];
                }
                if li > 0 {
                    let z = &act.pre[li - 1];
                    delta = (0..*n_in)
                        .map(|i| {
                            if z[i] > 0.0 {
                                (0..*n_out).map(|j| w[i * n_out + j] * delta[j]).sum()
                            } else {
                                0.0
                            }
                        })
                        .collect();
                }
            }
        }
    }

    fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    }

    fn softmax_of_negated(h: &[f64]) -> Vec<f64> {
        let lo = h.iter().cloned().fold(f64::INFINITY, f64::min);
        let e: Vec<f64> = h.iter().map(|v| (lo - v).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|v| v / z).collect()
    }

    fn first_max(p: &[f64]) -> usize {
        let mut best = 0;
        for i in 1..p.len() {
            if p[i] > p[best] {
                best = i;
            }
        }
        best
    }

    fn prototypes(emb: &[Vec<f64>], labels: &[usize], n_way: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
        let d = emb[0].len();
        let mut protos = vec![vec![0.0; d]; n_way];
        let mut counts = vec![0usize; n_way];
        for (e, &y) in emb.iter().zip(labels) {
            counts[y] += 1;
            for (p, v) in protos[y].iter_mut().zip(e) {
                *p += v;
            }
        }
        for (p, &c) in protos.iter_mut().zip(&counts) {
            p.iter_mut().for_each(|v| *v /= c as f64);
        }
        (protos, counts)
    }

    /// Query predictions after `iters` iterations of support-CE fine-tuning.
    /// Each iteration predicts from the current weights before stepping, and
    /// the last iteration's predictions are returned.
    pub fn predict(
        mut mlp: Mlp,
        support: &[(Vec<f64>, usize)],
        queries: &[Vec<f64>],
        n_way: usize,
        iters: usize,
        lr: f64,
        weight_decay: f64,
    ) -> Vec<usize> {
        let labels: Vec<usize> = support.iter().map(|s| s.1).collect();
        let classify = |mlp: &Mlp| {
            let emb: Vec<Vec<f64>> = support.iter().map(|s| mlp.embed(&s.0)).collect();
            let (protos, _) = prototypes(&emb, &labels, n_way);
            queries
                .iter()
                .map(|q| {
                    let e = mlp.embed(q);
                    let h: Vec<f64> = protos.iter().map(|p| sq_dist(&e, p)).collect();
                    first_max(&softmax_of_negated(&h))
                })
                .collect::<Vec<_>>()
        };
        let mut preds = classify(&mlp);
        for _ in 0..iters {
            preds = classify(&mlp);
            let acts: Vec<Activations> = support.iter().map(|s| mlp.run(&s.0)).collect();
            let emb: Vec<&Vec<f64>> = acts.iter().map(|a| a.inputs.last().unwrap()).collect();
            let owned: Vec<Vec<f64>> = emb.iter().map(|e| e.to_vec()).collect();
            let (protos, counts) = prototypes(&owned, &labels, n_way);
            let d = protos[0].len();
            let mut g_emb = vec![vec![0.0; d]; support.len()];
            let mut g_proto = vec![vec![0.0; d]; n_way];
            for (i, e) in owned.iter().enumerate() {
                let h: Vec<f64> = protos.iter().map(|p| sq_dist(e, p)).collect();
                let p = softmax_of_negated(&h);
                let y = labels[i];
                // -log(max(p_y, 1e-30)) has zero slope below the floor.
                if p[y] < 1e-30 {
                    continue;
                }
                for c in 0..n_way {
                    let dh = if c == y { 1.0 } else { 0.0 } - p[c];
                    for k in 0..d {
                        let diff = e[k] - protos[c][k];
                        g_emb[i][k] += dh * 2.0 * diff;
                        g_proto[c][k] -= dh * 2.0 * diff;
                    }
                }
            }
            for (i, &y) in labels.iter().enumerate() {
                for k in 0..d {
                    g_emb[i][k] += g_proto[y][k] / counts[y] as f64;
                }
            }
            let mut grads: Vec<(Vec<f64>, Vec<f64>)> = mlp
                .layers
                .iter()
                .map(|(w, b, _, _)| (vec![0.0; w.len()], vec![0.0; b.len()]))
                .collect();
            for (a, g) in acts.iter().zip(&g_emb) {
                mlp.backprop(a, g, &mut grads);
            }
            for ((w, b, _, _), (gw, gb)) in mlp.layers.iter_mut().zip(&grads) {
                for (x, g) in w.iter_mut().zip(gw) {
                    *x -= lr * (g + weight_decay * *x);
                }
                for (x, g) in b.iter_mut().zip(gb) {
                    *x -= lr * (g + weight_decay * *x);
                }
            }
        }
        preds
    }
}

// 2
fn protonet_reduction(desk: &Desk) -> Verdict {
    let cfg = AblationVariant::Protonet.apply(&desk.cfg.adapt);
    let episodes = desk.episodes(PROTONET_EPISODES);
    let (mut agree, mut total, mut mismatched_episodes) = (0usize, 0usize, 0usize);
    for (i, ep) in episodes.iter().enumerate() {
        let lib = desk.finetune(ep, &cfg, desk.seed(i));
        let support: Vec<(Vec<f64>, usize)> = ep.support.iter().map(|s| (s.x.clone(), s.label)).collect();
        let queries: Vec<Vec<f64>> = ep.query.iter().map(|s| s.x.clone()).collect();
        let oracle = protonet_oracle::predict(
            protonet_oracle::Mlp::from_params(&desk.ckpt.encoder),
            &support,
            &queries,
            ep.n_way,
            cfg.iters,
            cfg.lr,
            cfg.weight_decay,
        );
        let same = lib.predictions.iter().zip(&oracle).filter(|(a, b)| a == b).count();
        agree += same;
        total += oracle.len();
        if same != oracle.len() {
            mismatched_episodes += 1;
        }
    }
    let detail = format!(
        "{agree}/{total} query predictions agree with the straight-line oracle over {PROTONET_EPISODES} episodes \
         ({mismatched_episodes} episodes differ)"
    );
    if agree == total {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 3
fn pcn_mean_bridge() -> Verdict {
    let (k, d) = (5, 8);
    let pcn = PcnParams::block_average(k, d, true);
    let mut worst = 0.0f64;
    for class in 0..BRIDGE_CLASSES {
        let mut rng = derive_rng(7, "bridge", class as u64);
        let group: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..d).map(|_| rng.random_range(0.0..3.0)).collect())
            .collect();
        let mut mean = vec![0.0; d];
        for e in &group {
            for (m, v) in mean.iter_mut().zip(e) {
                *m += v / k as f64;
            }
        }
        let groups = vec![group];
        let via_pcn = PrototypeSet::pcn(&groups, &pcn).map_err(|e| e.to_string())?;
        let via_mean = PrototypeSet::mean(&groups).map_err(|e| e.to_string())?;
        for (a, (b, m)) in via_pcn.vectors[0].iter().zip(via_mean.vectors[0].iter().zip(&mean)) {
            worst = worst.max((a - b).abs()).max((a - m).abs());
        }
    }
    let detail = format!("max |pcn - mean| = {worst:.2e} over {BRIDGE_CLASSES} classes (<= {BRIDGE_TOL:e})");
    if worst <= BRIDGE_TOL {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 4
fn wma_algebra(desk: &Desk) -> Verdict {
    let base = &desk.cfg.adapt;
    let mut state = WmaState::new(1, 1, base.alpha0);
    let mut alpha_err = 0.0f64;
    for i in 1..=ALPHA_ITERS {
        state.begin_iteration(base.gamma, false);
        alpha_err = alpha_err.max((state.alpha - base.alpha0 * base.gamma.powi(i as i32)).abs());
    }

    let mut hull_violations = 0usize;
    let mut hull_checks = 0usize;
    let mut argmax_mismatch = 0usize;
    let mut trace_alpha_err = 0.0f64;
    for (i, ep) in desk.episodes(WMA_RUNS).iter().enumerate() {
        let n_q = ep.query.len();
        let mut lo = vec![vec![0.0f64; ep.n_way]; n_q];
        let mut hi = vec![vec![0.0f64; ep.n_way]; n_q];
        let mut observe = |s: &IterationSnapshot<'_>| {
            trace_alpha_err = trace_alpha_err.max((s.alpha - base.alpha0 * base.gamma.powi(s.iter as i32)).abs());
            for q in 0..n_q {
                for c in 0..ep.n_way {
                    lo[q][c] = lo[q][c].min(s.h[q][c]);
                    hi[q][c] = hi[q][c].max(s.h[q][c]);
                    let t = s.h_tilde[q][c];
                    hull_checks += 1;
                    if !(lo[q][c] <= t && t <= hi[q][c]) {
                        hull_violations += 1;
                    }
                }
                if s.iter == 1 && argmax(&s.pseudo_labels[q]) != argmax(&softmax_neg_values(&s.h[q])) {
                    argmax_mismatch += 1;
                }
            }
        };
        finetune_episode_observed(
            &desk.ckpt.encoder,
            &desk.ckpt.pcn,
            &ep.task(),
            base,
            desk.seed(i),
            &mut observe,
        )
        .map_err(|e| e.to_string())?;
    }
    let alpha_err = alpha_err.max(trace_alpha_err);
    let detail = format!(
        "alpha max err {alpha_err:.1e} over {ALPHA_ITERS} iterations (<= {ALPHA_TOL:e}); \
         {hull_violations}/{hull_checks} hull violations and {argmax_mismatch} iteration-1 argmax mismatches \
         over {WMA_RUNS} runs"
    );
    if alpha_err <= ALPHA_TOL && hull_violations == 0 && argmax_mismatch == 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 5
fn gate_equivalence(desk: &Desk) -> Verdict {
    let closed = AdaptConfig {
        epsilon: 1.0,
        ..desk.cfg.adapt.clone()
    };
    let dropped = AblationVariant::NoCeTransductive.apply(&desk.cfg.adapt);
    let hash = "gate";
    let root = pipeline::eval_root(&desk.cfg);
    let run = |cfg: &AdaptConfig| {
        evaluate(
            &desk.ckpt.encoder,
            &desk.ckpt.pcn,
            &desk.target,
            desk.cfg.episode,
            cfg,
            GATE_EPISODES,
            root,
            hash,
        )
    };
    let (m_closed, o_closed) = run(&closed).map_err(|e| e.to_string())?;
    let (m_dropped, o_dropped) = run(&dropped).map_err(|e| e.to_string())?;
    let traces_equal = o_closed
        .iter()
        .zip(&o_dropped)
        .filter(|(a, b)| a.trace.to_csv() == b.trace.to_csv() && a.predictions == b.predictions)
        .count();
    let metrics_equal = m_closed.to_csv() == m_dropped.to_csv() && m_closed.mean.to_bits() == m_dropped.mean.to_bits();
    let detail = format!(
        "{traces_equal}/{GATE_EPISODES} traces identical, metrics {}",
        if metrics_equal { "identical" } else { "differ" }
    );
    if traces_equal == GATE_EPISODES && metrics_equal {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 6
fn transduction_contract(desk: &Desk) -> Verdict {
    let mut identical = 0usize;
    for (i, ep) in desk.episodes(PERMUTATION_EPISODES).iter().enumerate() {
        let mut permuted = ep.clone();
        let mut labels = permuted.query_labels();
        labels.shuffle(&mut derive_rng(11, "permute-query-labels", i as u64));
        for (s, y) in permuted.query.iter_mut().zip(labels) {
            s.label = y;
        }
        let seed = desk.seed(i);
        let a = desk.finetune(ep, &desk.cfg.adapt, seed);
        let b = desk.finetune(&permuted, &desk.cfg.adapt, seed);
        if outcomes_identical(&a, &b) {
            identical += 1;
        }
    }
    let detail = format!(
        "{identical}/{PERMUTATION_EPISODES} fine-tuning outcomes bitwise identical under query-label permutation"
    );
    if identical == PERMUTATION_EPISODES {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 7
fn directional_efficacy(desk: &Desk) -> Verdict {
    let start = Instant::now();
    let rows = run_ablation(
        &AblationVariant::ALL,
        &desk.ckpt.encoder,
        &desk.ckpt.pcn,
        &desk.target,
        desk.cfg.episode,
        &desk.cfg.adapt,
        desk.cfg.harness.n_tasks,
        pipeline::eval_root(&desk.cfg),
        &desk.ckpt.config_hash,
    )
    .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let mean = |v: AblationVariant| {
        rows.iter()
            .find(|r| r.variant == v)
            .expect("variant evaluated")
            .metrics
            .mean
    };
    let full = mean(AblationVariant::Full);
    let protonet = mean(AblationVariant::Protonet);
    let mut failures = Vec::new();
    if full - protonet < MIN_GAIN_OVER_PROTONET {
        failures.push(format!(
            "full - protonet = {:+.2} pts < {:.1}",
            100.0 * (full - protonet),
            100.0 * MIN_GAIN_OVER_PROTONET
        ));
    }
    for r in &rows {
        if r.variant != AblationVariant::Full && full < r.metrics.mean - MAX_DEFICIT {
            failures.push(format!(
                "{} {:.2}% > full {:.2}% + {:.1} pts",
                r.variant.id(),
                100.0 * r.metrics.mean,
                100.0 * full,
                100.0 * MAX_DEFICIT
            ));
        }
    }
    if elapsed >= EFFICACY_BUDGET {
        failures.push(format!("took {:.0} s", elapsed.as_secs_f64()));
    }
    let table: Vec<String> = rows
        .iter()
        .map(|r| format!("{} {:.2}", r.variant.id(), 100.0 * r.metrics.mean))
        .collect();
    let detail = format!(
        "{} tasks in {:.0} s: {}{}",
        desk.cfg.harness.n_tasks,
        elapsed.as_secs_f64(),
        table.join(", "),
        if failures.is_empty() {
            String::new()
        } else {
            format!("; {}", failures.join("; "))
        }
    );
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 8
fn higher_shot() -> Verdict {
    let mut cfg = RunConfig::from_toml_str(DESK_CONFIG).map_err(|e| e.to_string())?;
    cfg.meta_train.iters = 200;
    cfg.meta_train.warmup_iters = 100;
    cfg.adapt.cluster_k = HIGH_SHOT_K;
    cfg.harness.n_tasks = 10;
    let mut five = cfg.clone();
    five.episode.k_shot = HIGH_SHOT_K;
    cfg.episode.k_shot = HIGH_SHOT;
    cfg.validate().map_err(|e| e.to_string())?;

    let (ckpt, _) = pipeline::train(&cfg, |_| {}).map_err(|e| e.to_string())?;
    let (_, target) = pipeline::benchmark(&cfg).map_err(|e| e.to_string())?;
    let (metrics, _) = evaluate(
        &ckpt.encoder,
        &ckpt.pcn,
        &target,
        cfg.episode,
        &cfg.adapt,
        cfg.harness.n_tasks,
        pipeline::eval_root(&cfg),
        &ckpt.config_hash,
    )
    .map_err(|e| e.to_string())?;
    let (_, pcn_five) = pipeline::init_model(&five);
    let (high, low) = (ckpt.pcn.param_count(), pcn_five.param_count());
    let detail = format!(
        "{HIGH_SHOT}-shot with {HIGH_SHOT_K} centroids: accuracy {:.2}% on {} tasks; PCN parameters {high} vs {low} at {HIGH_SHOT_K}-shot",
        100.0 * metrics.mean,
        metrics.n_tasks
    );
    if high == low && metrics.mean.is_finite() {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 9
fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).expect("readable run directory") {
            let path = entry.expect("directory entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).expect("readable artifact"));
            }
        }
    }
    out
}

fn run_cli(args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_appl"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "appl {} exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(out.stdout)
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out_dir = dir.path().join("out");
    let config = dir.path().join("run.toml");
    let text = format!(
        "seed = 3\noutput_dir = {:?}\n\n[meta_train]\niters = 60\nwarmup_iters = 20\ninner_lr = 1e-4\nouter_lr = 3e-3\n\n\
         [adapt]\nlr = 3e-4\niters = 20\n\n[harness]\nn_tasks = 6\n",
        out_dir.to_string_lossy()
    );
    std::fs::write(&config, text).map_err(|e| e.to_string())?;
    let cfg = RunConfig::from_path(&config).map_err(|e| e.to_string())?;
    let run_dir = cfg.run_dir().map_err(|e| e.to_string())?;
    let c = config.to_str().unwrap();
    let replay_seed = eval_seed(pipeline::eval_root(&cfg), 2).to_string();

    let pass = |workers: &str| -> Result<(BTreeMap<String, Vec<u8>>, Vec<u8>), String> {
        if out_dir.exists() {
            std::fs::remove_dir_all(&out_dir).map_err(|e| e.to_string())?;
        }
        let w = ["--workers", workers];
        let mut stdout = Vec::new();
        for args in [
            vec!["gen-bench", "-c", c],
            vec!["meta-train", "-c", c],
            vec!["adapt-eval", "-c", c],
            vec!["adapt-eval", "-c", c, "--variant", "no_wma"],
            vec!["ablate", "-c", c, "--variants", "protonet,no_pcn,full"],
            vec!["sweep", "-c", c, "--param", "alpha0", "--grid", "0.3,0.7"],
            vec!["replay", "-c", c, "--seed", &replay_seed],
            vec!["gradcheck", "--episodes", "3", "--seed", "5"],
        ] {
            let mut full: Vec<&str> = w.to_vec();
            full.extend(args);
            stdout.extend(run_cli(&full)?);
        }
        Ok((read_tree(&run_dir), stdout))
    };
    let (first, out1) = pass("1")?;
    let (second, out2) = pass("2")?;
    let differing: Vec<&String> = first
        .keys()
        .chain(second.keys())
        .filter(|k| first.get(*k) != second.get(*k))
        .collect();
    let has_traces = first.keys().any(|k| k.starts_with("traces/")) && first.contains_key("metrics.csv");
    let detail = format!(
        "{} artifacts from 8 subcommand runs, {} differ, stdout {}",
        first.len(),
        differing.len(),
        if out1 == out2 { "identical" } else { "differs" }
    );
    if differing.is_empty() && out1 == out2 && has_traces {
        Ok(detail)
    } else {
        Err(format!("{detail}: {differing:?}"))
    }
}

// 10
/// Minimum SSE over all partitions of `points` into exactly `k` non-empty
/// blocks, enumerated as restricted growth strings.
fn brute_force_sse(points: &[Vec<f64>], k: usize) -> f64 {
    fn sse(points: &[Vec<f64>], assign: &[usize], k: usize) -> f64 {
        let d = points[0].len();
        let mut total = 0.0;
        for c in 0..k {
            let members: Vec<&Vec<f64>> = points
                .iter()
                .zip(assign)
                .filter(|(_, &a)| a == c)
                .map(|(p, _)| p)
                .collect();
            let mut mean = vec![0.0; d];
            for p in &members {
                for (m, v) in mean.iter_mut().zip(p.iter()) {
                    *m += v / members.len() as f64;
                }
            }
            for p in &members {
                total += p.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
        }
        total
    }
    fn walk(points: &[Vec<f64>], k: usize, assign: &mut Vec<usize>, used: usize, best: &mut f64) {
        let i = assign.len();
        if i == points.len() {
            if used == k {
                *best = best.min(sse(points, assign, k));
            }
            return;
        }
        if k - used > points.len() - i {
            return;
        }
        for c in 0..=used.min(k - 1) {
            assign.push(c);
            walk(points, k, assign, used.max(c + 1), best);
            assign.pop();
        }
    }
    let mut best = f64::INFINITY;
    walk(points, k, &mut Vec::new(), 0, &mut best);
    best
}

fn kmeans_oracle() -> Verdict {
    let mut worst = 0.0f64;
    let mut mismatches = 0usize;
    for inst in 0..KMEANS_INSTANCES {
        let mut rng = derive_rng(13, "kmeans-oracle", inst as u64);
        let n = rng.random_range(1..=KMEANS_MAX_POINTS);
        let k = rng.random_range(1..=KMEANS_MAX_K.min(n));
        let d = rng.random_range(1..=3);
        let points: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let blob = rng.random_range(0..3) as f64 * 4.0;
                (0..d).map(|_| blob + rng.random_range(-1.5..1.5)).collect()
            })
            .collect();
        let mut tape = Tape::new();
        let vars: Vec<_> = points
            .iter()
            .map(|p| tape.constant(Tensor::vector(p.clone())))
            .collect();
        let centroids = cluster_reduce(&mut tape, &vars, k, derive_seed(13, "kmeans-seed", inst as u64))
            .map_err(|e| e.to_string())?;
        let centroids: Vec<Vec<f64>> = centroids.iter().map(|&v| tape.value(v).data().to_vec()).collect();
        let got: f64 = points
            .iter()
            .map(|p| {
                centroids
                    .iter()
                    .map(|c| p.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        let best = brute_force_sse(&points, k);
        let rel = (got - best).abs() / best.max(1.0);
        worst = worst.max(rel);
        if centroids.len() != k || rel > KMEANS_REL_TOL {
            mismatches += 1;
        }
    }
    let detail = format!(
        "{}/{KMEANS_INSTANCES} instances at the brute-force optimum, worst relative SSE gap {worst:.1e} (<= {KMEANS_REL_TOL:e})",
        KMEANS_INSTANCES - mismatches
    );
    if mismatches == 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn report(id: usize, name: &str, verdict: Verdict, start: Instant) -> bool {
    let secs = start.elapsed().as_secs_f64();
    match verdict {
        Ok(d) => {
            println!("PASS  {id:>2}. {name}: {d} [{secs:.1} s]");
            true
        }
        Err(d) => {
            println!("FAIL  {id:>2}. {name}: {d} [{secs:.1} s]");
            false
        }
    }
}

fn main() {
    let mut passed = Vec::new();
    let timed = |f: &dyn Fn() -> Verdict| {
        let t = Instant::now();
        (f(), t)
    };

    let (v, t) = timed(&gradient_correctness);
    passed.push(report(1, "gradient correctness", v, t));

    let t = Instant::now();
    let desk = Desk::load();
    println!(
        "      meta-trained the committed benchmark in {:.1} s",
        t.elapsed().as_secs_f64()
    );

    let (v, t) = timed(&|| protonet_reduction(&desk));
    passed.push(report(2, "protonet reduction", v, t));
    let (v, t) = timed(&pcn_mean_bridge);
    passed.push(report(3, "pcn-mean bridge", v, t));
    let (v, t) = timed(&|| wma_algebra(&desk));
    passed.push(report(4, "wma algebra", v, t));
    let (v, t) = timed(&|| gate_equivalence(&desk));
    passed.push(report(5, "gate equivalence", v, t));
    let (v, t) = timed(&|| transduction_contract(&desk));
    passed.push(report(6, "transduction contract", v, t));
    let (v, t) = timed(&|| directional_efficacy(&desk));
    passed.push(report(7, "directional efficacy", v, t));
    let (v, t) = timed(&higher_shot);
    passed.push(report(8, "higher-shot scalability", v, t));
    let (v, t) = timed(&determinism);
    passed.push(report(9, "determinism", v, t));
    let (v, t) = timed(&kmeans_oracle);
    passed.push(report(10, "k-means oracle", v, t));

    let n_pass = passed.iter().filter(|&&p| p).count();
    println!("acceptance: {n_pass}/{} criteria passed", passed.len());
    if n_pass != passed.len() {
        std::process::exit(1);
    }
}
