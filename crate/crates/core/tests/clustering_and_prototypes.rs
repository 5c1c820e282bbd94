use appl_core::prototypes::{kmeans, KMeansParams};
use appl_core::{PcnParams, PrototypeSet};
use proptest::prelude::*;

fn sse_of(points: &[Vec<f64>], assign: &[usize], k: usize) -> f64 {
    let d = points[0].len();
    (0..k)
        .map(|c| {
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
            members
                .iter()
                .map(|p| p.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .sum::<f64>()
        })
        .sum()
}

/// Best SSE over every assignment of points to `k` labels that uses all labels.
fn brute_force(points: &[Vec<f64>], k: usize) -> f64 {
    let n = points.len();
    let mut best = f64::INFINITY;
    let mut assign = vec![0usize; n];
    for code in 0..k.pow(n as u32) {
        let mut c = code;
        for a in assign.iter_mut() {
            *a = c % k;
            c /= k;
        }
        if (0..k).all(|l| assign.contains(&l)) {
            best = best.min(sse_of(points, &assign, k));
        }
    }
    best
}

fn points() -> impl Strategy<Value = (Vec<Vec<f64>>, usize)> {
    (1usize..=7, 1usize..=3).prop_flat_map(|(n, d)| {
        (
            prop::collection::vec(prop::collection::vec(-5.0..5.0f64, d), n),
            1usize..=n.min(3),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kmeans_reaches_the_enumerated_optimum((pts, k) in points(), seed in any::<u64>()) {
        let c = kmeans(&pts, k, seed, KMeansParams::default()).unwrap();
        let best = brute_force(&pts, k);
        prop_assert!((c.sse - best).abs() <= 1e-9 * best.max(1.0), "sse {} vs optimum {}", c.sse, best);

        let mut seen: Vec<usize> = c.members.iter().flatten().copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..pts.len()).collect::<Vec<_>>());
        prop_assert!(c.members.iter().all(|m| !m.is_empty()));
        prop_assert!(c.history.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn kmeans_ignores_input_order((pts, k) in points(), seed in any::<u64>()) {
        let mut rev = pts.clone();
        rev.reverse();
        let a = kmeans(&pts, k, seed, KMeansParams::default()).unwrap();
        let b = kmeans(&rev, k, seed, KMeansParams::default()).unwrap();
        prop_assert_eq!(a.centroids, b.centroids);
    }

    #[test]
    fn mean_prototypes_match_loop_and_ignore_order(
        group in prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 4), 1..8),
    ) {
        let mut want = vec![0.0; 4];
        for e in &group {
            for (w, v) in want.iter_mut().zip(e) {
                *w += v;
            }
        }
        want.iter_mut().for_each(|w| *w /= group.len() as f64);
        let got = PrototypeSet::mean(&[group.clone()]).unwrap();
        for (a, b) in got.vectors[0].iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        let mut rev = group;
        rev.reverse();
        let again = PrototypeSet::mean(&[rev]).unwrap();
        for (a, b) in got.vectors[0].iter().zip(&again.vectors[0]) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn averaging_pcn_equals_mean_on_nonnegative_embeddings(
        groups in prop::collection::vec(prop::collection::vec(prop::collection::vec(0.0..4.0f64, 3), 4), 1..5),
    ) {
        let pcn = PcnParams::block_average(4, 3, true);
        let a = PrototypeSet::pcn(&groups, &pcn).unwrap();
        let b = PrototypeSet::mean(&groups).unwrap();
        for (x, y) in a.vectors.iter().flatten().zip(b.vectors.iter().flatten()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }
}
