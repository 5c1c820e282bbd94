use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    /// Episode class index in `0..n_way`.
    pub label: usize,
}

/// One N-way K-shot task with labelled support and query sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_per_class: usize,
    pub support: Vec<Sample>,
    pub query: Vec<Sample>,
    /// Episode class index → global class id.
    pub class_map: Vec<u32>,
}

impl Episode {
    pub fn input_dim(&self) -> usize {
        self.support.first().map_or(0, |s| s.x.len())
    }

    /// Checks per-class balance, label range, dimensions and that the class
    /// map is injective.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Parse(msg));
        if self.n_way == 0 || self.k_shot == 0 {
            return bad("n_way and k_shot must be positive".into());
        }
        if self.class_map.len() != self.n_way {
            return bad(format!(
                "class_map has {} entries for {} ways",
                self.class_map.len(),
                self.n_way
            ));
        }
        let mut ids = self.class_map.clone();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return bad("class_map is not injective".into());
        }
        let dim = self.input_dim();
        for (set, per_class, name) in [
            (&self.support, self.k_shot, "support"),
            (&self.query, self.q_per_class, "query"),
        ] {
            let mut counts = vec![0usize; self.n_way];
            for s in set {
                if s.label >= self.n_way {
                    return bad(format!("{name} label {} out of range for {} ways", s.label, self.n_way));
                }
                if s.x.len() != dim {
                    return bad(format!("{name} vector has {} values, expected {dim}", s.x.len()));
                }
                counts[s.label] += 1;
            }
            if let Some((c, &n)) = counts.iter().enumerate().find(|(_, &n)| n != per_class) {
                return bad(format!("{name} class {c} has {n} instances, expected {per_class}"));
            }
        }
        Ok(())
    }

    /// The task as the adapter sees it: query labels removed.
    pub fn task(&self) -> Task {
        Task {
            n_way: self.n_way,
            k_shot: self.k_shot,
            support: self.support.clone(),
            query: self.query.iter().map(|s| s.x.clone()).collect(),
        }
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|s| s.label).collect()
    }

    /// Fraction of `predictions` matching the query labels.
    pub fn accuracy(&self, predictions: &[usize]) -> f64 {
        let correct = self.correct_count(predictions);
        correct as f64 / self.query.len() as f64
    }

    pub fn correct_count(&self, predictions: &[usize]) -> usize {
        predictions
            .iter()
            .zip(&self.query)
            .filter(|(p, s)| **p == s.label)
            .count()
    }
}

/// Label-free view of an episode handed to target-domain adaptation.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub n_way: usize,
    pub k_shot: usize,
    pub support: Vec<Sample>,
    pub query: Vec<Vec<f64>>,
}

impl Task {
    /// Support indices per class, in order of appearance.
    pub fn support_by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.n_way];
        for (i, s) in self.support.iter().enumerate() {
            groups[s.label].push(i);
        }
        groups
    }
}

/// N-way K-shot layout with `q_per_class` queries per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeShape {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_per_class: usize,
}

impl Default for EpisodeShape {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 5,
            q_per_class: 15,
        }
    }
}

impl EpisodeShape {
    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 {
            return Err(Error::config("episode.n_way must be >= 2"));
        }
        if self.k_shot == 0 {
            return Err(Error::config("episode.k_shot must be >= 1"));
        }
        if self.q_per_class == 0 {
            return Err(Error::config("episode.q_per_class must be >= 1"));
        }
        Ok(())
    }
}
