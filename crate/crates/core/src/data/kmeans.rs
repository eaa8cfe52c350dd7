//! Lloyd's k-means with k-means++ seeding and silhouette-based choice of k.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k_candidates: Vec<usize>,
    pub restarts: usize,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k_candidates: (2..=8).collect(),
            restarts: 20,
            max_iter: 300,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Mean silhouette of the chosen partition; `None` for `k = 1`.
    pub silhouette: Option<f64>,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    centroids
        .iter()
        .enumerate()
        .map(|(i, c)| (i, dist2(p, c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

fn plus_plus<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..points.len())
        } else {
            let mut u = rng.random_range(0.0..total);
            d.iter()
                .position(|&w| {
                    u -= w;
                    u < 0.0
                })
                .unwrap_or(points.len() - 1)
        };
        centroids.push(points[pick].clone());
        let c = centroids.last().expect("just pushed");
        for (di, p) in d.iter_mut().zip(points) {
            *di = di.min(dist2(p, c));
        }
    }
    centroids
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iter: usize) -> (Vec<Vec<f64>>, Vec<usize>, f64) {
    let dim = points[0].len();
    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..max_iter {
        let mut changed = false;
        for (a, p) in assign.iter_mut().zip(points) {
            let (i, _) = nearest(p, &centroids);
            if *a != i {
                *a = i;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (&a, p) in assign.iter().zip(points) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        for ((c, s), n) in centroids.iter_mut().zip(sums).zip(counts) {
            // Empty clusters keep their previous centroid.
            if n > 0 {
                *c = s.into_iter().map(|v| v / n as f64).collect();
            }
        }
    }
    let inertia = assign.iter().zip(points).map(|(&a, p)| dist2(p, &centroids[a])).sum();
    (centroids, assign, inertia)
}

/// Best-of-`restarts` Lloyd run for a fixed `k`.
pub fn kmeans_fixed(points: &[Vec<f64>], k: usize, cfg: &KMeansConfig) -> Result<KMeansResult> {
    if k == 0 || k > points.len() {
        return Err(Error::invalid(format!("k = {k} with {} points", points.len())));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite())) {
        return Err(Error::invalid("k-means points must be finite and of equal dimension"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut best: Option<(Vec<Vec<f64>>, Vec<usize>, f64)> = None;
    for _ in 0..cfg.restarts.max(1) {
        let init = plus_plus(points, k, &mut rng);
        let run = lloyd(points, init, cfg.max_iter);
        if best.as_ref().is_none_or(|b| run.2 < b.2) {
            best = Some(run);
        }
    }
    let (centroids, assignments, inertia) = best.expect("at least one restart");
    let silhouette = (k > 1).then(|| silhouette_score(points, &assignments, k));
    Ok(KMeansResult {
        k,
        centroids,
        assignments,
        inertia,
        silhouette,
    })
}

/// Runs every candidate `k` and keeps the one with the highest mean
/// silhouette. A single candidate is returned as is.
pub fn kmeans_cluster(points: &[Vec<f64>], cfg: &KMeansConfig) -> Result<KMeansResult> {
    if cfg.k_candidates.is_empty() {
        return Err(Error::config("k_candidates", "must not be empty"));
    }
    let mut best: Option<KMeansResult> = None;
    for &k in &cfg.k_candidates {
        let r = kmeans_fixed(points, k, cfg)?;
        let better = match &best {
            None => true,
            Some(b) => r.silhouette.unwrap_or(f64::NEG_INFINITY) > b.silhouette.unwrap_or(f64::NEG_INFINITY),
        };
        if better {
            best = Some(r);
        }
    }
    Ok(best.expect("non-empty candidates"))
}

/// Mean silhouette coefficient. Points in singleton clusters score 0.
pub fn silhouette_score(points: &[Vec<f64>], assignments: &[usize], k: usize) -> f64 {
    let n = points.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for j in 0..n {
            if i != j {
                sums[assignments[j]] += dist2(&points[i], &points[j]).sqrt();
                counts[assignments[j]] += 1;
            }
        }
        let own = assignments[i];
        if counts[own] == 0 {
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if b.is_finite() {
            let m = a.max(b);
            if m > 0.0 {
                total += (b - a) / m;
            }
        }
    }
    total / n as f64
}
