//! Lloyd's k-means with k-means++ seeding, used for codebook-size (elbow)
//! analysis and codebook initialization.

use rand::Rng as _;

use super::sq_dist;
use crate::error::{invalid, Result};
use crate::par;
use crate::rng::rng_from;

#[derive(Debug, Clone)]
pub struct KMeansResult {
    /// `k × d`, row-major.
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    pub sse: f64,
    /// SSE after each assignment pass, first entry is the seeded initialization.
    pub sse_history: Vec<f64>,
}

fn assign(points: &[f64], d: usize, centroids: &[f64]) -> (Vec<usize>, f64) {
    let n = points.len() / d;
    let best = par::map_range(n, |i| {
        let p = &points[i * d..(i + 1) * d];
        let mut bi = 0;
        let mut bd = f64::INFINITY;
        for (c, cen) in centroids.chunks_exact(d).enumerate() {
            let dist = sq_dist(p, cen);
            if dist < bd {
                bd = dist;
                bi = c;
            }
        }
        (bi, bd)
    });
    let sse = best.iter().map(|b| b.1).sum();
    (best.into_iter().map(|b| b.0).collect(), sse)
}

fn seed_centroids(points: &[f64], n: usize, d: usize, k: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_from(seed);
    let mut centroids = Vec::with_capacity(k * d);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(&points[first * d..(first + 1) * d]);
    let mut dmin: Vec<f64> = (0..n)
        .map(|i| sq_dist(&points[i * d..(i + 1) * d], &centroids[..d]))
        .collect();
    for _ in 1..k {
        let total: f64 = dmin.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in dmin.iter().enumerate() {
                if w > 0.0 && u < w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            if dmin[chosen] == 0.0 {
                chosen = dmin.iter().rposition(|&w| w > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            // every point already coincides with a centroid
            rng.random_range(0..n)
        };
        let c = points[pick * d..(pick + 1) * d].to_vec();
        for (i, dm) in dmin.iter_mut().enumerate() {
            *dm = dm.min(sq_dist(&points[i * d..(i + 1) * d], &c));
        }
        centroids.extend_from_slice(&c);
    }
    centroids
}

/// Clusters `points` (`n × d`, row-major) into `k` groups.
///
/// Empty clusters keep their previous centroid, so SSE never increases.
pub fn kmeans(points: &[f64], d: usize, k: usize, iters: usize, seed: u64) -> Result<KMeansResult> {
    if d == 0 || points.len() % d != 0 {
        return Err(invalid("point array is not a whole number of rows"));
    }
    let n = points.len() / d;
    if k == 0 || n < k {
        return Err(invalid(format!("kmeans needs N >= k >= 1, got N = {n}, k = {k}")));
    }
    let mut centroids = seed_centroids(points, n, d, k, seed);
    let (mut assignments, mut sse) = assign(points, d, &centroids);
    let mut sse_history = vec![sse];
    for _ in 0..iters {
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for j in 0..d {
                sums[a * d + j] += points[i * d + j];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    centroids[c * d + j] = sums[c * d + j] / counts[c] as f64;
                }
            }
        }
        let (next, next_sse) = assign(points, d, &centroids);
        sse_history.push(next_sse);
        let done = next == assignments;
        assignments = next;
        sse = next_sse;
        if done {
            break;
        }
    }
    Ok(KMeansResult {
        centroids,
        assignments,
        sse,
        sse_history,
    })
}
