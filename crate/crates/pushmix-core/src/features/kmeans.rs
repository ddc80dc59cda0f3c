//! Lloyd's algorithm with k-means++ seeding, deterministic per seed.

use std::collections::BTreeSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Result of a k-means fit.
#[derive(Debug, Clone)]
pub struct KmeansFit {
    /// Cluster index per input row.
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squared distances at the final assignment.
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after each assignment step; non-increasing.
    pub inertia_trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(row: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(row, c);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    (best, best_d)
}

fn distinct_rows(rows: &[Vec<f64>]) -> usize {
    let mut seen: BTreeSet<Vec<u64>> = BTreeSet::new();
    for row in rows {
        seen.insert(row.iter().map(|v| v.to_bits()).collect());
    }
    seen.len()
}

/// Cluster rows into k groups. Errors if k is 0 or exceeds the number of
/// distinct rows.
pub fn kmeans(rows: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<KmeansFit> {
    if k == 0 {
        return Err(Error::invalid("cluster count must be at least 1"));
    }
    let distinct = distinct_rows(rows);
    if k > distinct {
        return Err(Error::invalid(format!(
            "cluster count {k} exceeds {distinct} distinct rows"
        )));
    }
    let n = rows.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding: first centroid uniform, the rest proportional to the
    // squared distance to the nearest chosen centroid.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(rows[rng.random_range(0..n)].clone());
    while centroids.len() < k {
        let dists: Vec<f64> = rows.iter().map(|r| nearest(r, &centroids).1).collect();
        let total: f64 = dists.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, d) in dists.iter().enumerate() {
                if target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.push(rows[idx].clone());
    }

    let mut assignments = vec![0usize; n];
    let mut inertia_trace = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        let mut changed = false;
        let mut inertia = 0.0;
        for (i, row) in rows.iter().enumerate() {
            let (best, d) = nearest(row, &centroids);
            inertia += d;
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
        }
        inertia_trace.push(inertia);
        if !changed && inertia_trace.len() > 1 {
            break;
        }
        let dim = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, row) in rows.iter().enumerate() {
            counts[assignments[i]] += 1;
            for (s, v) in sums[assignments[i]].iter_mut().zip(row) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for v in sums[c].iter_mut() {
                    *v /= counts[c] as f64;
                }
                centroids[c] = sums[c].clone();
            }
            // empty clusters keep their previous centroid
        }
    }
    let inertia = *inertia_trace.last().unwrap_or(&0.0);
    Ok(KmeansFit {
        assignments,
        centroids,
        inertia,
        iterations,
        inertia_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn single_cluster_centroid_is_mean() {
        let rows = vec![vec![1.0, 0.0], vec![3.0, 2.0], vec![5.0, 4.0]];
        let fit = kmeans(&rows, 1, 7, 50).unwrap();
        assert!(fit.assignments.iter().all(|&a| a == 0));
        assert_abs_diff_eq!(fit.centroids[0][0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.centroids[0][1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn separates_two_clouds_like_exhaustive_search() {
        // Two tight clouds; compare against the optimal 2-clustering found by
        // enumerating all 2^(n-1) label vectors.
        let rows = vec![
            vec![0.0, 0.1],
            vec![0.1, 0.0],
            vec![0.05, 0.05],
            vec![5.0, 5.1],
            vec![5.1, 5.0],
            vec![4.95, 5.05],
            vec![5.05, 4.9],
        ];
        let n = rows.len();
        let mut best = f64::INFINITY;
        let mut best_labels = vec![0usize; n];
        for mask in 0..(1u32 << (n - 1)) {
            let labels: Vec<usize> = (0..n)
                .map(|i| if i == 0 { 0 } else { ((mask >> (i - 1)) & 1) as usize })
                .collect();
            let mut cost = 0.0;
            for c in 0..2 {
                let members: Vec<&Vec<f64>> = rows
                    .iter()
                    .zip(&labels)
                    .filter(|(_, &l)| l == c)
                    .map(|(r, _)| r)
                    .collect();
                if members.is_empty() {
                    continue;
                }
                let dim = rows[0].len();
                let mut mean = vec![0.0; dim];
                for r in &members {
                    for (m, v) in mean.iter_mut().zip(r.iter()) {
                        *m += v;
                    }
                }
                for m in mean.iter_mut() {
                    *m /= members.len() as f64;
                }
                for r in &members {
                    cost += sq_dist(r, &mean);
                }
            }
            if cost < best {
                best = cost;
                best_labels = labels;
            }
        }
        let fit = kmeans(&rows, 2, 13, 100).unwrap();
        assert_abs_diff_eq!(fit.inertia, best, epsilon = 1e-9);
        // same partition up to label swap
        let agree = fit
            .assignments
            .iter()
            .zip(&best_labels)
            .filter(|(a, b)| a == b)
            .count();
        assert!(agree == n || agree == 0, "partition mismatch");
    }

    #[test]
    fn k_equal_to_distinct_rows_gives_zero_inertia() {
        let rows = vec![vec![0.0], vec![1.0], vec![2.0], vec![1.0]];
        let fit = kmeans(&rows, 3, 3, 100).unwrap();
        assert_abs_diff_eq!(fit.inertia, 0.0, epsilon = 1e-12);
        assert_eq!(fit.assignments[1], fit.assignments[3]);
    }

    #[test]
    fn k_above_distinct_rows_is_an_error() {
        let rows = vec![vec![0.0], vec![0.0], vec![1.0]];
        assert!(kmeans(&rows, 3, 0, 10).is_err());
    }

    #[test]
    fn inertia_trace_is_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..20 {
            let rows: Vec<Vec<f64>> = (0..40)
                .map(|_| (0..3).map(|_| rng.random::<f64>() * 10.0).collect())
                .collect();
            let fit = kmeans(&rows, 4, trial, 100).unwrap();
            for w in fit.inertia_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "inertia increased: {w:?}");
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let rows: Vec<Vec<f64>> = (0..30).map(|i| vec![(i % 7) as f64, (i % 3) as f64]).collect();
        let a = kmeans(&rows, 3, 99, 100).unwrap();
        let b = kmeans(&rows, 3, 99, 100).unwrap();
        assert_eq!(a.assignments, b.assignments);
        assert_eq!(a.centroids, b.centroids);
    }
}
