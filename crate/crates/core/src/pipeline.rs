//! Glue between a [`RunConfig`] and the training and evaluation entry points.

use crate::config::RunConfig;
use crate::episodes::{make_benchmark, Domain};
use crate::error::Result;
use crate::meta_train::{meta_train, CurveRow, TrainCurve};
use crate::models::{Checkpoint, EncoderParams, PcnParams};
use crate::seed::derive_seed;

/// Source and target domains of the configured benchmark.
pub fn benchmark(cfg: &RunConfig) -> Result<(Domain, Domain)> {
    make_benchmark(&cfg.bench, derive_seed(cfg.seed, "bench", 0))
}

/// Freshly initialized encoder and PCN for the configured shapes.
pub fn init_model(cfg: &RunConfig) -> (EncoderParams, PcnParams) {
    cfg.model
        .init(cfg.bench.input_dim, cfg.pcn_k_in(), derive_seed(cfg.seed, "model", 0))
}

/// Meta-trains from a fresh initialization on the source domain.
pub fn train(cfg: &RunConfig, progress: impl FnMut(&CurveRow)) -> Result<(Checkpoint, TrainCurve)> {
    cfg.validate()?;
    let (source, _) = benchmark(cfg)?;
    let (encoder, pcn) = init_model(cfg);
    let out = meta_train(
        &cfg.meta_train,
        cfg.episode,
        &source,
        encoder,
        pcn,
        cfg.train_method()?,
        derive_seed(cfg.seed, "train", 0),
        progress,
    )?;
    let ckpt = Checkpoint {
        config_hash: cfg.config_hash()?,
        encoder: out.encoder,
        pcn: out.pcn,
    };
    Ok((ckpt, out.curve))
}

/// Fails unless `ckpt` has the encoder widths and PCN input count `cfg` needs.
pub fn check_checkpoint(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<()> {
    let mut dims = vec![cfg.bench.input_dim];
    dims.extend(&cfg.model.hidden);
    dims.push(cfg.model.embed_dim);
    ckpt.check_compatible(&dims, cfg.pcn_k_in())
}

/// Root seed of the evaluation task list.
pub fn eval_root(cfg: &RunConfig) -> u64 {
    derive_seed(cfg.seed, "evaluate", 0)
}
