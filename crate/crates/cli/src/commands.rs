use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use appl_core::episodes::{read_episodes, write_episodes, Episode};
use appl_core::gradcheck_suite::{self, TOLERANCE};
use appl_core::harness::{
    ablation_csv, ablation_markdown, eval_episodes, eval_seed, evaluate_tasks, run_ablation, sweep_csv, TaskOutcome,
};
use appl_core::{pipeline, AblationVariant, AdaptConfig, Checkpoint, Error, Metrics, Result, RunConfig, SweepParam};

/// A parsed config and its artifact directory, created on demand.
struct Run {
    cfg: RunConfig,
    dir: PathBuf,
    hash: String,
}

impl Run {
    fn open(path: &Path) -> Result<Self> {
        let cfg = RunConfig::from_path(path)?;
        let hash = cfg.config_hash()?;
        let dir = cfg.run_dir()?;
        create_dir(&dir)?;
        write(&dir.join("config.toml"), &cfg.echo()?)?;
        println!("config {hash} -> {}", dir.display());
        Ok(Self { cfg, dir, hash })
    }

    fn checkpoint(&self, explicit: Option<&Path>) -> Result<Checkpoint> {
        let path = explicit.map_or_else(|| self.dir.join("checkpoint.json"), Path::to_path_buf);
        if !path.exists() {
            return Err(Error::io(
                &path,
                std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    "checkpoint not found; run `appl meta-train` with this config or pass --checkpoint",
                ),
            ));
        }
        let ckpt = Checkpoint::load(&path)?;
        pipeline::check_checkpoint(&self.cfg, &ckpt)?;
        Ok(ckpt)
    }

    fn n_tasks(&self) -> Result<usize> {
        match self.cfg.harness.n_tasks {
            0 => Err(Error::Argument(
                "harness.n_tasks is 0; evaluation needs at least one task".into(),
            )),
            n => Ok(n),
        }
    }

    fn episodes(&self, n: usize) -> Result<Vec<Episode>> {
        let (_, target) = pipeline::benchmark(&self.cfg)?;
        eval_episodes(&target, self.cfg.episode, n, pipeline::eval_root(&self.cfg))
    }

    fn seeds(&self, n: usize) -> Vec<u64> {
        let root = pipeline::eval_root(&self.cfg);
        (0..n).map(|i| eval_seed(root, i)).collect()
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn trace_name(index: usize) -> String {
    format!("task_{index:04}.csv")
}

pub fn gen_bench(config: &Path) -> Result<ExitCode> {
    let run = Run::open(config)?;
    let n = run.n_tasks()?;
    let path = run.dir.join("episodes.jsonl");
    write_episodes(&path, &run.episodes(n)?)?;
    println!("wrote {n} episodes to {}", path.display());
    Ok(ExitCode::SUCCESS)
}

pub fn meta_train(config: &Path) -> Result<ExitCode> {
    let run = Run::open(config)?;
    let every = (run.cfg.meta_train.iters / 10).max(1);
    let (ckpt, curve) = pipeline::train(&run.cfg, |row| {
        if row.iter % every == 0 {
            eprintln!("episode {:>6}  total {:.4}", row.iter, row.total);
        }
    })?;
    ckpt.save(&run.dir.join("checkpoint.json"))?;
    write(&run.dir.join("train_curve.csv"), &curve.to_csv())?;
    println!(
        "trained {} episodes; checkpoint in {}",
        curve.rows.len(),
        run.dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn write_metrics(dir: &Path, metrics: &Metrics, variant: &str, root_seed: u64) -> Result<()> {
    create_dir(dir)?;
    write(&dir.join("metrics.csv"), &metrics.to_csv())?;
    write(&dir.join("summary.json"), &metrics.summary_json(variant, root_seed)?)
}

fn write_traces(dir: &Path, outcomes: &[TaskOutcome]) -> Result<()> {
    let traces = dir.join("traces");
    create_dir(&traces)?;
    for (i, o) in outcomes.iter().enumerate() {
        write(&traces.join(trace_name(i)), &o.trace.to_csv())?;
    }
    Ok(())
}

/// Artifacts of the `full` variant go in the run directory itself, others in
/// a subdirectory named after the variant.
fn variant_dir(run: &Run, variant: AblationVariant) -> PathBuf {
    match variant {
        AblationVariant::Full => run.dir.clone(),
        v => run.dir.join(v.id()),
    }
}

pub fn adapt_eval(
    config: &Path,
    checkpoint: Option<&Path>,
    variant: &str,
    episodes: Option<&Path>,
) -> Result<ExitCode> {
    let variant: AblationVariant = variant.parse()?;
    let run = Run::open(config)?;
    let ckpt = run.checkpoint(checkpoint)?;
    let episodes = match episodes {
        Some(p) => read_episodes(p)?,
        None => run.episodes(run.n_tasks()?)?,
    };
    if episodes.is_empty() {
        return Err(Error::Argument("no evaluation tasks".into()));
    }
    let seeds = run.seeds(episodes.len());
    let cfg: AdaptConfig = variant.apply(&run.cfg.adapt);
    let outcomes = evaluate_tasks(&ckpt.encoder, &ckpt.pcn, &episodes, &seeds, &cfg)?;
    let metrics = Metrics::from_accuracies(outcomes.iter().map(|o| o.accuracy).collect(), seeds, &run.hash)?;
    let dir = variant_dir(&run, variant);
    write_metrics(&dir, &metrics, variant.id(), run.cfg.seed)?;
    if run.cfg.harness.write_traces {
        write_traces(&dir, &outcomes)?;
    }
    println!(
        "{}: accuracy {:.2}% ± {:.2} over {} tasks",
        variant.id(),
        100.0 * metrics.mean,
        100.0 * metrics.ci95,
        metrics.n_tasks
    );
    Ok(ExitCode::SUCCESS)
}

pub fn ablate(config: &Path, checkpoint: Option<&Path>, variants: &[String]) -> Result<ExitCode> {
    let variants: Vec<AblationVariant> = if variants.is_empty() {
        AblationVariant::ALL.to_vec()
    } else {
        variants.iter().map(|v| v.parse()).collect::<Result<_>>()?
    };
    let run = Run::open(config)?;
    let ckpt = run.checkpoint(checkpoint)?;
    let (_, target) = pipeline::benchmark(&run.cfg)?;
    let rows = run_ablation(
        &variants,
        &ckpt.encoder,
        &ckpt.pcn,
        &target,
        run.cfg.episode,
        &run.cfg.adapt,
        run.n_tasks()?,
        pipeline::eval_root(&run.cfg),
        &run.hash,
    )?;
    for r in &rows {
        write_metrics(
            &run.dir.join("ablation").join(r.variant.id()),
            &r.metrics,
            r.variant.id(),
            run.cfg.seed,
        )?;
    }
    write(&run.dir.join("ablation.csv"), &ablation_csv(&rows))?;
    let table = ablation_markdown(&rows);
    write(&run.dir.join("ablation.md"), &table)?;
    print!("{table}");
    Ok(ExitCode::SUCCESS)
}

pub fn sweep(config: &Path, checkpoint: Option<&Path>, param: &str, grid: &[f64]) -> Result<ExitCode> {
    let param: SweepParam = param.parse()?;
    let run = Run::open(config)?;
    let ckpt = run.checkpoint(checkpoint)?;
    let (_, target) = pipeline::benchmark(&run.cfg)?;
    let points = appl_core::harness::sweep(
        param,
        grid,
        &ckpt.encoder,
        &ckpt.pcn,
        &target,
        run.cfg.episode,
        &run.cfg.adapt,
        run.n_tasks()?,
        pipeline::eval_root(&run.cfg),
        &run.hash,
    )?;
    let csv = sweep_csv(param, &points);
    write(&run.dir.join(format!("sweep_{}.csv", param.id())), &csv)?;
    for p in &points {
        println!("{} = {}: {:.2}%", param.id(), p.value, 100.0 * p.metrics.mean);
    }
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(episodes: usize, seed: u64) -> Result<ExitCode> {
    if episodes == 0 {
        return Err(Error::Argument("--episodes must be at least 1".into()));
    }
    let reports = gradcheck_suite::run(episodes, seed)?;
    for r in &reports {
        println!(
            "{:<16} max_rel_error {:.3e}  worst_episode {:>3}  coordinates {}",
            r.term.id(),
            r.max_rel_error,
            r.worst_episode,
            r.coordinates
        );
    }
    if reports.iter().all(|r| r.passed()) {
        println!("all terms below {TOLERANCE:e}");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("some terms exceed {TOLERANCE:e}");
        Ok(ExitCode::from(3))
    }
}

pub fn replay(config: &Path, checkpoint: Option<&Path>, seed: u64, variant: &str) -> Result<ExitCode> {
    let variant: AblationVariant = variant.parse()?;
    let run = Run::open(config)?;
    let n = run.n_tasks()?;
    let index = run
        .seeds(n)
        .iter()
        .position(|&s| s == seed)
        .ok_or_else(|| Error::Argument(format!("seed {seed} is not one of the {n} evaluation task seeds")))?;
    let ckpt = run.checkpoint(checkpoint)?;
    let (_, target) = pipeline::benchmark(&run.cfg)?;
    let shape = run.cfg.episode;
    let episode = target.sample_episode(shape.n_way, shape.k_shot, shape.q_per_class, seed)?;
    let cfg = variant.apply(&run.cfg.adapt);
    let out = appl_core::finetune_episode(&ckpt.encoder, &ckpt.pcn, &episode.task(), &cfg, seed)?;
    let dir = variant_dir(&run, variant).join("replay");
    create_dir(&dir)?;
    let path = dir.join(trace_name(index));
    write(&path, &out.trace.to_csv())?;
    println!(
        "task {index} (seed {seed}): accuracy {:.2}%; trace in {}",
        100.0 * episode.accuracy(&out.predictions),
        path.display()
    );
    Ok(ExitCode::SUCCESS)
}
