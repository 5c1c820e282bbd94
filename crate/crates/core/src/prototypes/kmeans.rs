//! Lloyd's k-means with k-means++ seeding, used to shrink a class's support
//! embeddings to a fixed number of centroids.

use std::cmp::Ordering;

use rand::Rng;

use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KMeansParams {
    pub max_iters: usize,
    /// Independent k-means++ restarts; the lowest-SSE run wins.
    pub restarts: usize,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            max_iters: 50,
            restarts: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    /// Centroids in lexicographic order of their coordinates.
    pub centroids: Vec<Vec<f64>>,
    /// Member point indices (into the caller's slice) per centroid; never
    /// empty. Each centroid is the mean of its members.
    pub members: Vec<Vec<usize>>,
    /// Total within-cluster sum of squares.
    pub sse: f64,
    /// SSE after every Lloyd iteration of the winning restart.
    pub history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

fn mean_of(points: &[&[f64]], idx: &[usize]) -> Vec<f64> {
    let mut m = vec![0.0; points[0].len()];
    for &i in idx {
        for (a, x) in m.iter_mut().zip(points[i]) {
            *a += x;
        }
    }
    let n = idx.len() as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

fn plus_plus_init(points: &[&[f64]], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            d2.iter()
                .position(|&w| {
                    acc += w;
                    acc > u
                })
                .unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).expect("total > 0"))
        } else {
            0
        };
        let c = points[pick].to_vec();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

struct Run {
    assign: Vec<usize>,
    centroids: Vec<Vec<f64>>,
    history: Vec<f64>,
}

fn lloyd(points: &[&[f64]], mut centroids: Vec<Vec<f64>>, max_iters: usize) -> Run {
    let (n, k) = (points.len(), centroids.len());
    let mut assign = vec![usize::MAX; n];
    let mut history: Vec<f64> = Vec::new();
    for _ in 0..max_iters.max(1) {
        let mut next: Vec<usize> = points
            .iter()
            .map(|p| {
                let mut best = (0, f64::INFINITY);
                for (j, c) in centroids.iter().enumerate() {
                    let d = sq_dist(p, c);
                    if d < best.1 {
                        best = (j, d);
                    }
                }
                best.0
            })
            .collect();

        // Empty-cluster repair: move the point farthest from its centroid,
        // taken from a cluster that keeps at least one member.
        let mut counts = vec![0usize; k];
        next.iter().for_each(|&j| counts[j] += 1);
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            let donor = (0..n)
                .filter(|&i| counts[next[i]] > 1)
                .map(|i| (i, sq_dist(points[i], &centroids[next[i]])))
                .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                    Some((_, bd)) if bd >= d => best,
                    _ => Some((i, d)),
                });
            let (i, _) = donor.expect("k <= n guarantees a multi-member cluster");
            counts[next[i]] -= 1;
            counts[j] = 1;
            next[i] = j;
            centroids[j] = points[i].to_vec();
        }

        let changed = next != assign;
        assign = next;
        let mut groups = vec![Vec::new(); k];
        for (i, &j) in assign.iter().enumerate() {
            groups[j].push(i);
        }
        centroids = groups.iter().map(|g| mean_of(points, g)).collect();
        let sse: f64 = points
            .iter()
            .zip(&assign)
            .map(|(p, &j)| sq_dist(p, &centroids[j]))
            .sum();
        if let Some(&prev) = history.last() {
            debug_assert!(
                sse <= prev + 1e-9 * prev.abs().max(1.0),
                "Lloyd SSE increased from {prev} to {sse}"
            );
        }
        history.push(sse);
        if !changed {
            break;
        }
    }
    Run {
        assign,
        centroids,
        history,
    }
}

/// Clusters `points` into exactly `k` groups.
///
/// Points are put in lexicographic order before seeding, so the result
/// depends only on the multiset of points and `seed`. Ties in assignment go
/// to the lowest centroid index.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, params: KMeansParams) -> Result<Clustering> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::arg(format!("cannot form {k} clusters from {n} points")));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::dim("k-means points have differing dimensions"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| lex_cmp(&points[a], &points[b]).then(a.cmp(&b)));
    let sorted: Vec<&[f64]> = order.iter().map(|&i| points[i].as_slice()).collect();

    let mut best: Option<(f64, Run)> = None;
    for r in 0..params.restarts.max(1) {
        let mut rng = rng_from_seed(derive_seed(seed, "kmeans", r as u64));
        let init = plus_plus_init(&sorted, k, &mut rng);
        let run = lloyd(&sorted, init, params.max_iters);
        let sse = *run.history.last().expect("at least one iteration");
        if best.as_ref().is_none_or(|(b, _)| sse < *b) {
            best = Some((sse, run));
        }
    }
    let (sse, run) = best.expect("at least one restart");

    let mut members = vec![Vec::new(); k];
    for (si, &j) in run.assign.iter().enumerate() {
        members[j].push(order[si]);
    }
    let mut clusters: Vec<(Vec<f64>, Vec<usize>)> = run.centroids.into_iter().zip(members).collect();
    for (_, m) in &mut clusters {
        m.sort_unstable();
    }
    clusters.sort_by(|a, b| lex_cmp(&a.0, &b.0).then_with(|| a.1.cmp(&b.1)));
    let (centroids, members) = clusters.into_iter().unzip();
    Ok(Clustering {
        centroids,
        members,
        sse,
        history: run.history,
    })
}
