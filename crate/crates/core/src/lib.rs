//! Few-shot classification under domain shift with learned prototypes.
//!
//! A feature encoder and a prototype calculator network (PCN) are
//! meta-trained on source-domain episodes. On each target-domain task the
//! encoder is fine-tuned with support cross-entropy, discriminative and
//! cohesive prototype losses, and a confidence-gated transductive loss whose
//! soft pseudo-labels come from a weighted moving average of query distances.

pub mod adapt;
pub mod autodiff;
pub mod config;
pub mod episodes;
pub mod error;
pub mod gradcheck_suite;
pub mod harness;
pub mod losses;
pub mod meta_train;
pub mod models;
pub mod numfmt;
pub mod pipeline;
pub mod prototypes;
pub mod seed;

pub use adapt::{finetune_episode, AdaptConfig, AdaptOutcome, WmaState};
pub use autodiff::{grad_check, GradCheckReport, Tape, Tensor, Var};
pub use config::RunConfig;
pub use episodes::{make_benchmark, BenchmarkSpec, Domain, Episode, EpisodeShape, Sample, Task};
pub use error::{Error, Result};
pub use harness::{AblationVariant, Metrics, SweepParam};
pub use losses::{LossBreakdown, LossWeights};
pub use meta_train::{meta_train, MetaTrainConfig};
pub use models::{Checkpoint, EncoderParams, ModelConfig, Optimizer, OptimizerKind, PcnParams};
pub use prototypes::{PrototypeMethod, PrototypeSet, Provenance};
