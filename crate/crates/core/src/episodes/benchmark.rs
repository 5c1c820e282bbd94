//! Synthetic source/target benchmark with a controllable domain shift.
//!
//! Class means live in the first `signal_dims` latent coordinates; the
//! remaining coordinates carry noise only. The source domain amplifies those
//! nuisance coordinates by `nuisance_gain`. The target domain applies the same
//! gains, then an anisotropic axis scaling and a random rotation that mixes
//! signal and nuisance directions, then an offset and optional `tanh`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::domain::{Domain, DomainSpec, Nonlinearity, Transform};
use crate::error::{Error, Result};
use crate::seed::{derive_rng, derive_seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub input_dim: usize,
    pub signal_dims: usize,
    pub source_classes: usize,
    pub target_classes: usize,
    /// Standard deviation of class-mean coordinates.
    pub class_spread: f64,
    /// Base within-class noise scale.
    pub noise_scale: f64,
    /// Per-class scales are `noise_scale·u` with `u ~ U[1−j, 1+j]`.
    pub scale_jitter: f64,
    pub nuisance_gain: f64,
    /// Standard deviation of the skew-symmetric generator of the rotation.
    pub shift_rotation: f64,
    /// Target axis gains are `exp(u)` with `u ~ U[−a, a]`.
    pub shift_anisotropy: f64,
    pub shift_offset: f64,
    pub target_nonlinearity: Nonlinearity,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            input_dim: 16,
            signal_dims: 8,
            source_classes: 40,
            target_classes: 20,
            class_spread: 1.0,
            noise_scale: 0.6,
            scale_jitter: 0.2,
            nuisance_gain: 2.0,
            shift_rotation: 0.3,
            shift_anisotropy: 0.5,
            shift_offset: 0.5,
            target_nonlinearity: Nonlinearity::None,
        }
    }
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::config(format!("bench: {m}")));
        if self.input_dim == 0 {
            return fail("input_dim must be > 0");
        }
        if self.signal_dims == 0 || self.signal_dims > self.input_dim {
            return fail("signal_dims must be in 1..=input_dim");
        }
        if self.source_classes == 0 || self.target_classes == 0 {
            return fail("source_classes and target_classes must be > 0");
        }
        if !(self.class_spread > 0.0) || !(self.noise_scale > 0.0) || !(self.nuisance_gain > 0.0) {
            return fail("class_spread, noise_scale and nuisance_gain must be > 0");
        }
        if !(0.0..1.0).contains(&self.scale_jitter) {
            return fail("scale_jitter must be in [0, 1)");
        }
        if self.shift_rotation < 0.0 || self.shift_anisotropy < 0.0 || self.shift_offset < 0.0 {
            return fail("shift parameters must be >= 0");
        }
        Ok(())
    }
}

fn class_block(spec: &BenchmarkSpec, root: u64, purpose: &str, count: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = derive_rng(root, purpose, 0);
    let means = (0..count)
        .map(|_| {
            (0..spec.input_dim)
                .map(|i| {
                    if i < spec.signal_dims {
                        spec.class_spread * rng.sample::<f64, _>(StandardNormal)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let j = spec.scale_jitter;
    let scales = (0..count)
        .map(|_| spec.noise_scale * rng.random_range(1.0 - j..=1.0 + j))
        .collect();
    (means, scales)
}

/// Cayley transform of a random skew-symmetric matrix: `(I − A)⁻¹(I + A)`.
fn random_rotation(dim: usize, strength: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    let mut a = DMatrix::<f64>::zeros(dim, dim);
    for i in 0..dim {
        for j in (i + 1)..dim {
            let v = strength * rng.sample::<f64, _>(StandardNormal);
            a[(i, j)] = v;
            a[(j, i)] = -v;
        }
    }
    let eye = DMatrix::<f64>::identity(dim, dim);
    let inv = (&eye - &a)
        .try_inverse()
        .expect("I − A is invertible for skew-symmetric A");
    inv * (eye + a)
}

/// Builds the source and target domains. Both are pure functions of
/// `(spec, root_seed)`; class ids are disjoint.
pub fn make_benchmark(spec: &BenchmarkSpec, root_seed: u64) -> Result<(Domain, Domain)> {
    spec.validate()?;
    let d = spec.input_dim;
    let gains: Vec<f64> = (0..d)
        .map(|i| if i < spec.signal_dims { 1.0 } else { spec.nuisance_gain })
        .collect();

    let (src_means, src_scales) = class_block(spec, root_seed, "source-classes", spec.source_classes);
    let mut src_t = Transform::identity(d);
    for i in 0..d {
        src_t.matrix[i * d + i] = gains[i];
    }
    let source = Domain::new(DomainSpec {
        name: "source".into(),
        input_dim: d,
        class_ids: (0..spec.source_classes as u32).collect(),
        class_means: src_means,
        class_scales: src_scales,
        transform: src_t,
        seed: derive_seed(root_seed, "source-domain", 0),
    })?;

    let (tgt_means, tgt_scales) = class_block(spec, root_seed, "target-classes", spec.target_classes);
    let mut rng = derive_rng(root_seed, "target-shift", 0);
    let rot = random_rotation(d, spec.shift_rotation, &mut rng);
    let a = spec.shift_anisotropy;
    let axis: Vec<f64> = (0..d)
        .map(|_| if a > 0.0 { rng.random_range(-a..=a).exp() } else { 1.0 })
        .collect();
    let mut matrix = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            matrix[i * d + j] = rot[(i, j)] * axis[j] * gains[j];
        }
    }
    let offset = (0..d)
        .map(|_| spec.shift_offset * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let first_target = spec.source_classes as u32;
    let target = Domain::new(DomainSpec {
        name: "target".into(),
        input_dim: d,
        class_ids: (first_target..first_target + spec.target_classes as u32).collect(),
        class_means: tgt_means,
        class_scales: tgt_scales,
        transform: Transform {
            matrix,
            offset,
            nonlinearity: spec.target_nonlinearity,
        },
        seed: derive_seed(root_seed, "target-domain", 0),
    })?;
    Ok((source, target))
}
