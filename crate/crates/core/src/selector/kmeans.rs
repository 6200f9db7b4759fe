//! Seeded Lloyd's k-means with k-means++ initialisation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub max_iters: usize,
    /// Stop once the summed centroid movement of one iteration drops below this.
    pub tolerance: f64,
    /// Independent k-means++ starts; the lowest-inertia run wins.
    pub restarts: usize,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            max_iters: 300,
            tolerance: 1e-6,
            restarts: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    /// Cluster id of every point.
    pub assignment: Vec<usize>,
    /// Sum of squared distances to assigned centroids.
    pub inertia: f64,
    pub iterations: usize,
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// (index, squared distance) of the nearest centroid; ties go to the lower id.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus_init(points: &[Vec<f64>], m: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < m {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut chosen = d2.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && r < w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            chosen
        } else {
            rng.gen_range(0..points.len())
        };
        let c = points[pick].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, params: &KMeansParams) -> KMeans {
    let dim = points[0].len();
    let m = centroids.len();
    let mut iterations = 0;
    for _ in 0..params.max_iters {
        iterations += 1;
        let nearest_all: Vec<(usize, f64)> = points.iter().map(|p| nearest(p, &centroids)).collect();
        let mut sums = vec![vec![0.0; dim]; m];
        let mut sizes = vec![0usize; m];
        for (p, &(j, _)) in points.iter().zip(&nearest_all) {
            sizes[j] += 1;
            for (s, x) in sums[j].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut next: Vec<Vec<f64>> = sums
            .into_iter()
            .zip(&sizes)
            .map(|(s, &n)| s.into_iter().map(|x| x / n.max(1) as f64).collect())
            .collect();
        // empty clusters restart at the point farthest from its centroid
        let mut taken = vec![false; points.len()];
        for j in (0..m).filter(|&j| sizes[j] == 0) {
            let far = nearest_all
                .iter()
                .enumerate()
                .filter(|(i, _)| !taken[*i])
                .fold(None, |best: Option<(usize, f64)>, (i, &(_, d))| match best {
                    Some((_, bd)) if bd >= d => best,
                    _ => Some((i, d)),
                });
            if let Some((i, _)) = far {
                taken[i] = true;
                next[j] = points[i].clone();
            }
        }
        let shift: f64 = centroids.iter().zip(&next).map(|(a, b)| sq_dist(a, b).sqrt()).sum();
        centroids = next;
        if shift < params.tolerance {
            break;
        }
    }
    let (assignment, inertia) = points.iter().fold((Vec::new(), 0.0), |(mut a, s), p| {
        let (j, d) = nearest(p, &centroids);
        a.push(j);
        (a, s + d)
    });
    KMeans {
        centroids,
        assignment,
        inertia,
        iterations,
    }
}

/// Clusters `points` into `m` groups. Caller guarantees `1 <= m <= points.len()`
/// and equal dimensions.
pub fn kmeans(points: &[Vec<f64>], m: usize, seed: u64, params: &KMeansParams) -> KMeans {
    assert!(m >= 1 && m <= points.len(), "need 1 <= m <= #points");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeans> = None;
    for _ in 0..params.restarts.max(1) {
        let init = plus_plus_init(points, m, &mut rng);
        let run = lloyd(points, init, params);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    best.expect("at least one restart")
}
