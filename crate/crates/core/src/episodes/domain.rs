use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::episode::{Episode, Sample};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    #[default]
    None,
    Tanh,
}

/// `y = φ(M·x + b)` applied to every latent sample of a domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    /// Row-major `[dim×dim]`.
    pub matrix: Vec<f64>,
    pub offset: Vec<f64>,
    pub nonlinearity: Nonlinearity,
}

impl Transform {
    pub fn identity(dim: usize) -> Self {
        let mut matrix = vec![0.0; dim * dim];
        for i in 0..dim {
            matrix[i * dim + i] = 1.0;
        }
        Self {
            matrix,
            offset: vec![0.0; dim],
            nonlinearity: Nonlinearity::None,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let dim = x.len();
        (0..dim)
            .map(|i| {
                let row = &self.matrix[i * dim..(i + 1) * dim];
                let y = row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.offset[i];
                match self.nonlinearity {
                    Nonlinearity::None => y,
                    Nonlinearity::Tanh => y.tanh(),
                }
            })
            .collect()
    }
}

/// Class-conditional Gaussian source of samples:
/// `x = transform(mean_c + scale_c·z)` with `z ~ N(0, I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub input_dim: usize,
    pub class_ids: Vec<u32>,
    pub class_means: Vec<Vec<f64>>,
    pub class_scales: Vec<f64>,
    pub transform: Transform,
    pub seed: u64,
}

/// A validated, immutable [`DomainSpec`] ready for sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    spec: DomainSpec,
}

impl Domain {
    pub fn new(spec: DomainSpec) -> Result<Self> {
        let n = spec.class_ids.len();
        if n == 0 {
            return Err(Error::config(format!("domain {}: no classes", spec.name)));
        }
        if spec.class_means.len() != n || spec.class_scales.len() != n {
            return Err(Error::config(format!(
                "domain {}: {} classes but {} means and {} scales",
                spec.name,
                n,
                spec.class_means.len(),
                spec.class_scales.len()
            )));
        }
        let d = spec.input_dim;
        if spec.class_means.iter().any(|m| m.len() != d)
            || spec.transform.matrix.len() != d * d
            || spec.transform.offset.len() != d
        {
            return Err(Error::config(format!(
                "domain {}: means and transform must have dimension {d}",
                spec.name
            )));
        }
        if let Some(s) = spec.class_scales.iter().find(|&&s| !(s > 0.0)) {
            return Err(Error::config(format!(
                "domain {}: class scale {s} must be > 0",
                spec.name
            )));
        }
        let mut ids = spec.class_ids.clone();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config(format!("domain {}: duplicate class ids", spec.name)));
        }
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &DomainSpec {
        &self.spec
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.spec.class_ids.len()
    }

    /// One draw of the class at position `class_pos` in this domain.
    pub fn sample_class(&self, class_pos: usize, rng: &mut impl Rng) -> Vec<f64> {
        let mean = &self.spec.class_means[class_pos];
        let scale = self.spec.class_scales[class_pos];
        let latent: Vec<f64> = mean
            .iter()
            .map(|m| m + scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.spec.transform.apply(&latent)
    }

    /// The noise-free image of a class mean.
    pub fn class_center(&self, class_pos: usize) -> Vec<f64> {
        self.spec.transform.apply(&self.spec.class_means[class_pos])
    }

    /// Draws an N-way K-shot episode with `q` queries per class.
    ///
    /// Classes are drawn without replacement; the episode is a pure function
    /// of the domain seed and `episode_seed`. Support is grouped by class in
    /// episode-index order; queries are shuffled.
    pub fn sample_episode(&self, n_way: usize, k_shot: usize, q: usize, episode_seed: u64) -> Result<Episode> {
        if n_way == 0 || k_shot == 0 {
            return Err(Error::config("episodes need n_way >= 1 and k_shot >= 1"));
        }
        if n_way > self.num_classes() {
            return Err(Error::config(format!(
                "domain {} has {} classes, cannot draw a {n_way}-way episode",
                self.spec.name,
                self.num_classes()
            )));
        }
        let mut rng = rng_from_seed(derive_seed(self.spec.seed, "episode", episode_seed));
        let picked = rand::seq::index::sample(&mut rng, self.num_classes(), n_way).into_vec();
        let mut support = Vec::with_capacity(n_way * k_shot);
        let mut query = Vec::with_capacity(n_way * q);
        for (label, &pos) in picked.iter().enumerate() {
            for _ in 0..k_shot {
                support.push(Sample {
                    x: self.sample_class(pos, &mut rng),
                    label,
                });
            }
            for _ in 0..q {
                query.push(Sample {
                    x: self.sample_class(pos, &mut rng),
                    label,
                });
            }
        }
        use rand::seq::SliceRandom;
        query.shuffle(&mut rng);
        Ok(Episode {
            n_way,
            k_shot,
            q_per_class: q,
            support,
            query,
            class_map: picked.iter().map(|&p| self.spec.class_ids[p]).collect(),
        })
    }
}
