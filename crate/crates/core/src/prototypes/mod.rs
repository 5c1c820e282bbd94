//! Class prototypes: plain means, PCN outputs, and cluster-then-PCN for
//! shot counts above the PCN's input width.
//!
//! The tape-level builders take support embeddings grouped by episode class
//! (each group in ascending within-class sample order) and return one
//! prototype `Var` per class. PCN inputs are the group's embeddings
//! concatenated in that order, so PCN prototypes depend on support order
//! while mean prototypes do not.

mod kmeans;

pub use kmeans::{kmeans, Clustering, KMeansParams};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::{BoundPcn, PcnParams};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Mean,
    Pcn,
    ClusterPcn,
}

/// How prototypes are formed from support embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrototypeMethod {
    Mean,
    Pcn,
    /// k-means each class down to the PCN's `k_in` centroids first.
    ClusterPcn,
}

impl PrototypeMethod {
    pub fn provenance(self) -> Provenance {
        match self {
            PrototypeMethod::Mean => Provenance::Mean,
            PrototypeMethod::Pcn => Provenance::Pcn,
            PrototypeMethod::ClusterPcn => Provenance::ClusterPcn,
        }
    }

    /// PCN when the shot count matches `k_in`, clustering when it exceeds it.
    pub fn for_shots(k_shot: usize, k_in: usize) -> Result<Self> {
        match k_shot.cmp(&k_in) {
            std::cmp::Ordering::Equal => Ok(PrototypeMethod::Pcn),
            std::cmp::Ordering::Greater => Ok(PrototypeMethod::ClusterPcn),
            std::cmp::Ordering::Less => Err(Error::dim(format!(
                "{k_shot}-shot support cannot feed a PCN that expects {k_in} embeddings per class"
            ))),
        }
    }
}

/// Prototype values detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub vectors: Vec<Vec<f64>>,
    pub provenance: Provenance,
}

impl PrototypeSet {
    pub fn new(vectors: Vec<Vec<f64>>, provenance: Provenance) -> Result<Self> {
        let d = vectors.first().map_or(0, Vec::len);
        if d == 0 {
            return Err(Error::dim("prototype set is empty"));
        }
        if vectors.iter().any(|v| v.len() != d) {
            return Err(Error::dim("prototypes have differing widths"));
        }
        if vectors.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite prototype".into()));
        }
        Ok(Self { vectors, provenance })
    }

    pub fn from_tape(tape: &Tape, protos: &[Var], provenance: Provenance) -> Result<Self> {
        Self::new(
            protos.iter().map(|&p| tape.value(p).data().to_vec()).collect(),
            provenance,
        )
    }

    pub fn n_way(&self) -> usize {
        self.vectors.len()
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    pub fn mean(groups: &[Vec<Vec<f64>>]) -> Result<Self> {
        let mut tape = Tape::new();
        let g = constants(&mut tape, groups);
        let p = mean_prototypes(&mut tape, &g)?;
        Self::from_tape(&tape, &p, Provenance::Mean)
    }

    pub fn pcn(groups: &[Vec<Vec<f64>>], pcn: &PcnParams) -> Result<Self> {
        let mut tape = Tape::new();
        let g = constants(&mut tape, groups);
        let bound = pcn.bind(&mut tape, false);
        let p = pcn_prototypes(&mut tape, &g, &bound)?;
        Self::from_tape(&tape, &p, Provenance::Pcn)
    }

    pub fn cluster_pcn(groups: &[Vec<Vec<f64>>], pcn: &PcnParams, seed: u64) -> Result<Self> {
        let mut tape = Tape::new();
        let g = constants(&mut tape, groups);
        let bound = pcn.bind(&mut tape, false);
        let p = cluster_pcn_prototypes(&mut tape, &g, &bound, seed)?;
        Self::from_tape(&tape, &p, Provenance::ClusterPcn)
    }
}

fn constants(tape: &mut Tape, groups: &[Vec<Vec<f64>>]) -> Vec<Vec<Var>> {
    groups
        .iter()
        .map(|g| g.iter().map(|x| tape.constant(Tensor::vector(x.clone()))).collect())
        .collect()
}

fn check_groups(groups: &[Vec<Var>]) -> Result<()> {
    if groups.is_empty() {
        return Err(Error::arg("no classes to build prototypes for"));
    }
    if let Some(n) = groups.iter().position(Vec::is_empty) {
        return Err(Error::arg(format!("class {n} has no support embeddings")));
    }
    Ok(())
}

fn mean_of(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let s = tape.add_n(vars)?;
    Ok(if vars.len() == 1 {
        s
    } else {
        tape.scale(s, 1.0 / vars.len() as f64)
    })
}

/// Per-class average embedding.
pub fn mean_prototypes(tape: &mut Tape, groups: &[Vec<Var>]) -> Result<Vec<Var>> {
    check_groups(groups)?;
    groups.iter().map(|g| mean_of(tape, g)).collect()
}

/// Per-class PCN output on the concatenated embeddings. Each class must
/// supply exactly `k_in` embeddings.
pub fn pcn_prototypes(tape: &mut Tape, groups: &[Vec<Var>], pcn: &BoundPcn) -> Result<Vec<Var>> {
    check_groups(groups)?;
    groups
        .iter()
        .enumerate()
        .map(|(n, g)| {
            if g.len() != pcn.k_in {
                return Err(Error::dim(format!(
                    "class {n} has {} support embeddings but the PCN takes {}; \
                     enable clustering (cluster_k = {}) for higher shot counts",
                    g.len(),
                    pcn.k_in,
                    pcn.k_in
                )));
            }
            let cat = tape.concat(g)?;
            pcn.forward(tape, cat)
        })
        .collect()
}

/// Reduces one class's embeddings to `k` centroids (lexicographic order),
/// each recorded on the tape as the mean of its member embeddings.
pub fn cluster_reduce(tape: &mut Tape, group: &[Var], k: usize, seed: u64) -> Result<Vec<Var>> {
    let points: Vec<Vec<f64>> = group.iter().map(|&v| tape.value(v).data().to_vec()).collect();
    let clustering = kmeans(&points, k, seed, KMeansParams::default())?;
    clustering
        .members
        .iter()
        .map(|m| {
            let vars: Vec<Var> = m.iter().map(|&i| group[i]).collect();
            mean_of(tape, &vars)
        })
        .collect()
}

/// k-means each class down to `k_in` centroids, then apply the PCN.
/// Class `n` clusters with seed `derive_seed(seed, "cluster", n)`.
pub fn cluster_pcn_prototypes(tape: &mut Tape, groups: &[Vec<Var>], pcn: &BoundPcn, seed: u64) -> Result<Vec<Var>> {
    check_groups(groups)?;
    let reduced = groups
        .iter()
        .enumerate()
        .map(|(n, g)| cluster_reduce(tape, g, pcn.k_in, derive_seed(seed, "cluster", n as u64)))
        .collect::<Result<Vec<_>>>()?;
    pcn_prototypes(tape, &reduced, pcn)
}

/// Dispatches on `method`; `pcn` is required for the PCN methods.
pub fn build_prototypes(
    tape: &mut Tape,
    groups: &[Vec<Var>],
    method: PrototypeMethod,
    pcn: Option<&BoundPcn>,
    seed: u64,
) -> Result<Vec<Var>> {
    let need = || Error::arg("PCN prototypes requested without PCN parameters");
    match method {
        PrototypeMethod::Mean => mean_prototypes(tape, groups),
        PrototypeMethod::Pcn => pcn_prototypes(tape, groups, pcn.ok_or_else(need)?),
        PrototypeMethod::ClusterPcn => cluster_pcn_prototypes(tape, groups, pcn.ok_or_else(need)?, seed),
    }
}
