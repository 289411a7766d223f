use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after each assignment step.
    pub inertia_trace: Vec<f64>,
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid (lowest index on ties) and squared distance.
pub fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign(data: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    data.par_iter().map(|x| nearest(x, centroids)).unzip()
}

fn plus_plus(data: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![data[rng.random_range(0..data.len())].clone()];
    let mut d2: Vec<f64> = data.iter().map(|x| sq_dist(x, &centroids[0])).collect();
    while centroids.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            // every point already coincides with a centroid
            Err(_) => rng.random_range(0..data.len()),
        };
        centroids.push(data[next].clone());
        let c = centroids.last().expect("just pushed");
        for (d, x) in d2.iter_mut().zip(data) {
            *d = d.min(sq_dist(x, c));
        }
    }
    centroids
}

/// k-means++ seeding followed by Lloyd iterations. Stops when no centroid
/// moves more than `tol` or after `max_iter` updates.
pub fn kmeans(data: &[Vec<f64>], k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<KMeansResult> {
    let n = data.len();
    if k == 0 || k > n {
        return Err(Error::precondition(format!("k-means needs 1 <= k <= N, got k={k}, N={n}")));
    }
    let dim = data[0].len();
    if data.iter().any(|r| r.len() != dim) {
        return Err(Error::shape("k-means rows must share a length"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus(data, k, &mut rng);
    let mut trace = Vec::new();
    let mut iterations = 0;
    let (mut assignments, mut dists) = assign(data, &centroids);
    trace.push(dists.iter().sum());
    while iterations < max_iter {
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (x, &a) in data.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(x) {
                *s += v;
            }
        }
        let mut taken = vec![false; n];
        let mut shift: f64 = 0.0;
        for j in 0..k {
            let new = if counts[j] > 0 {
                sums[j].iter().map(|s| s / counts[j] as f64).collect()
            } else {
                // re-seed an empty cluster at the point farthest from its centroid
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("k <= N leaves a free point");
                taken[far] = true;
                dists[far] = 0.0;
                data[far].clone()
            };
            shift = shift.max(sq_dist(&new, &centroids[j]).sqrt());
            centroids[j] = new;
        }
        let next = assign(data, &centroids);
        assignments = next.0;
        dists = next.1;
        trace.push(dists.iter().sum());
        if shift < tol {
            break;
        }
    }
    Ok(KMeansResult {
        k,
        inertia: *trace.last().expect("at least one assignment"),
        centroids,
        assignments,
        iterations,
        inertia_trace: trace,
    })
}

/// Best of `restarts` runs by inertia; restart `r` uses seed `seed + r`.
pub fn kmeans_restarts(data: &[Vec<f64>], k: usize, seed: u64, restarts: usize) -> Result<KMeansResult> {
    let mut best: Option<KMeansResult> = None;
    for r in 0..restarts.max(1) {
        let res = kmeans(data, k, seed.wrapping_add(r as u64), 300, 1e-6)?;
        if best.as_ref().is_none_or(|b| res.inertia < b.inertia) {
            best = Some(res);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::Normal;

    fn blobs(centers: &[[f64; 2]], per: usize, sigma: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for (c, ctr) in centers.iter().enumerate() {
            for _ in 0..per {
                pts.push(vec![ctr[0] + noise.sample(&mut rng), ctr[1] + noise.sample(&mut rng)]);
                truth.push(c);
            }
        }
        (pts, truth)
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let (pts, _) = blobs(&[[0.0, 0.0], [3.0, 1.0]], 10, 0.5, 1);
        let r = kmeans(&pts, 1, 0, 300, 1e-9).unwrap();
        let mean: Vec<f64> = (0..2).map(|j| pts.iter().map(|p| p[j]).sum::<f64>() / pts.len() as f64).collect();
        assert!(sq_dist(&r.centroids[0], &mean) < 1e-20);
        let total: f64 = pts.iter().map(|p| sq_dist(p, &mean)).sum();
        assert!((r.inertia - total).abs() < 1e-9);
    }

    #[test]
    fn nearest_assignment_and_consistent_inertia() {
        let (pts, _) = blobs(&[[0.0, 0.0], [1.0, 1.0], [2.0, 0.0]], 30, 0.6, 2);
        let r = kmeans(&pts, 4, 7, 300, 1e-6).unwrap();
        let mut recomputed = 0.0;
        for (p, &a) in pts.iter().zip(&r.assignments) {
            let (j, d) = nearest(p, &r.centroids);
            assert_eq!(a, j);
            recomputed += d;
        }
        assert!((recomputed - r.inertia).abs() < 1e-9);
        assert!(r.inertia_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn k_equals_n_has_zero_inertia() {
        let (pts, _) = blobs(&[[0.0, 0.0]], 7, 1.0, 3);
        assert_eq!(kmeans(&pts, 7, 0, 300, 1e-9).unwrap().inertia, 0.0);
        assert!(kmeans(&pts, 8, 0, 300, 1e-9).is_err());
    }

    #[test]
    fn duplicate_points_do_not_break_seeding() {
        let pts = vec![vec![1.0, 1.0]; 5];
        let r = kmeans(&pts, 3, 0, 300, 1e-9).unwrap();
        assert_eq!(r.inertia, 0.0);
    }
}
