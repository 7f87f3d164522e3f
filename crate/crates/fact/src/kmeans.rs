//! Seeded k-means (Lloyd's algorithm with k-means++ initialization and
//! restarts) over flat f64 vectors.
//!
//! Everything is deterministic for a given seed: restart with the lowest
//! within-cluster sum of squares wins, ties go to the earlier restart, and
//! the returned centroids are sorted canonically so cluster indices do not
//! depend on initialization order.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{FactError, Result};

#[derive(Debug, Clone)]
pub struct KMeansResult {
    /// Cluster index per input point.
    pub assignments: Vec<usize>,
    /// Cluster centroids, canonically ordered.
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squared distances.
    pub sse: f64,
}

const MAX_ITERS: usize = 200;

pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, restarts: usize) -> Result<KMeansResult> {
    if k == 0 || k > points.len() {
        return Err(FactError::DegenerateK(format!(
            "k = {k} with {} points",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(FactError::LengthMismatch(
            "points of differing dimension".into(),
        ));
    }

    let mut best: Option<KMeansResult> = None;
    for restart in 0..restarts.max(1) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_add(restart as u64));
        let run = lloyd(points, k, &mut rng);
        let better = match &best {
            None => true,
            Some(b) => run.sse < b.sse,
        };
        if better {
            best = Some(run);
        }
    }
    let mut result = best.expect("at least one restart");
    canonicalize(&mut result);
    Ok(result)
}

fn lloyd(points: &[Vec<f64>], k: usize, rng: &mut ChaCha20Rng) -> KMeansResult {
    let mut centroids = plus_plus_init(points, k, rng);
    let mut assignments = vec![0usize; points.len()];

    for _ in 0..MAX_ITERS {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let nearest = nearest_centroid(p, &centroids);
            if assignments[i] != nearest {
                assignments[i] = nearest;
                changed = true;
            }
        }

        let mut sums = vec![vec![0.0; points[0].len()]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Re-seed an empty cluster with the point farthest from its
                // current centroid.
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        let da = dist2(&points[a], &centroids[assignments[a]]);
                        let db = dist2(&points[b], &centroids[assignments[b]]);
                        da.total_cmp(&db)
                    })
                    .expect("points non-empty");
                centroids[c] = points[far].clone();
                assignments[far] = c;
                changed = true;
            } else {
                for (dst, s) in centroids[c].iter_mut().zip(&sums[c]) {
                    *dst = s / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }

    let sse = points
        .iter()
        .zip(&assignments)
        .map(|(p, &a)| dist2(p, &centroids[a]))
        .sum();
    KMeansResult {
        assignments,
        centroids,
        sse,
    }
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha20Rng) -> Vec<Vec<f64>> {
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..points.len())].clone());
    while centroids.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| {
                centroids
                    .iter()
                    .map(|c| dist2(p, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let weights = WeightedIndex::new(&d2).expect("nonnegative weights");
            weights.sample(rng)
        } else {
            // All remaining points coincide with a centroid.
            rng.gen_range(0..points.len())
        };
        centroids.push(points[next].clone());
    }
    centroids
}

fn nearest_centroid(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = dist2(point, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Sorts centroids lexicographically and remaps assignments, so cluster
/// indices are a function of the data alone.
fn canonicalize(result: &mut KMeansResult) {
    let k = result.centroids.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let ca = &result.centroids[a];
        let cb = &result.centroids[b];
        for (x, y) in ca.iter().zip(cb) {
            let ord = x.total_cmp(y);
            if ord != std::cmp::Ordering::Equal {
                return ord;
            }
        }
        std::cmp::Ordering::Equal
    });
    let mut remap = vec![0usize; k];
    for (new_idx, &old_idx) in order.iter().enumerate() {
        remap[old_idx] = new_idx;
    }
    result.centroids = order.iter().map(|&i| result.centroids[i].clone()).collect();
    for a in &mut result.assignments {
        *a = remap[*a];
    }
}
