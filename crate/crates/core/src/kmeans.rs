//! Lloyd's k-means with k-means++ seeding. Fully deterministic for a fixed
//! RNG: ties in assignment and empty-cluster repair resolve to the lowest
//! index.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::metric::squared_euclidean;

pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct KmeansResult {
    /// k × dim, row-major.
    pub centroids: Vec<f32>,
    /// Per input row, the centroid it belongs to.
    pub assignments: Vec<u32>,
    /// Sum of squared distances from rows to their centroids.
    pub objective: f64,
    pub iterations: usize,
}

/// Index of the centroid nearest to `point` (squared euclidean, lowest
/// index on ties).
pub fn nearest_centroid(centroids: &[f32], dim: usize, point: &[f32]) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (i, c) in centroids.chunks_exact(dim).enumerate() {
        let d = squared_euclidean(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// k-means++ initialization: first center sampled uniformly, later centers
/// sampled proportionally to squared distance from the chosen set.
fn seed_centroids(data: &[f32], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let rows = data.len() / dim;
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..rows);
    centroids.extend_from_slice(&data[first * dim..(first + 1) * dim]);
    let mut dists: Vec<f64> = data
        .chunks_exact(dim)
        .map(|p| squared_euclidean(p, &centroids[0..dim]))
        .collect();
    while centroids.len() < k * dim {
        let total: f64 = dists.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = rows - 1;
            for (i, d) in dists.iter().enumerate() {
                if target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            // All remaining points coincide with a center; any row works.
            rng.gen_range(0..rows)
        };
        let new_center = &data[pick * dim..(pick + 1) * dim];
        centroids.extend_from_slice(new_center);
        for (i, p) in data.chunks_exact(dim).enumerate() {
            let d = squared_euclidean(p, new_center);
            if d < dists[i] {
                dists[i] = d;
            }
        }
    }
    centroids
}

/// Run k-means until the largest centroid movement drops below `tol` or
/// `max_iters` passes complete.
///
/// Panics if `data` is empty, `dim` is 0, or `k` exceeds the row count;
/// callers validate those as parameter errors.
pub fn kmeans(
    data: &[f32],
    dim: usize,
    k: usize,
    max_iters: usize,
    tol: f64,
    rng: &mut ChaCha8Rng,
) -> KmeansResult {
    assert!(dim > 0 && !data.is_empty() && data.len() % dim == 0);
    let rows = data.len() / dim;
    assert!(k >= 1 && k <= rows, "k={k} rows={rows}");

    let mut centroids = seed_centroids(data, dim, k, rng);
    let mut assignments = vec![0u32; rows];
    let mut iterations = 0;

    for _ in 0..max_iters.max(1) {
        iterations += 1;
        for (i, p) in data.chunks_exact(dim).enumerate() {
            let (c, _) = nearest_centroid(&centroids, dim, p);
            assignments[i] = c as u32;
        }

        let mut sums = vec![0f64; k * dim];
        let mut counts = vec![0u64; k];
        for (i, p) in data.chunks_exact(dim).enumerate() {
            let c = assignments[i] as usize;
            counts[c] += 1;
            for (j, v) in p.iter().enumerate() {
                sums[c * dim + j] += f64::from(*v);
            }
        }
        // Repair empty clusters by stealing the row currently farthest from
        // its centroid (deterministic: first such row on ties).
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let mut worst = (0usize, -1.0f64);
            for (i, p) in data.chunks_exact(dim).enumerate() {
                let donor = assignments[i] as usize;
                if counts[donor] <= 1 {
                    continue;
                }
                let d = squared_euclidean(p, &centroids[donor * dim..(donor + 1) * dim]);
                if d > worst.1 {
                    worst = (i, d);
                }
            }
            let (row, _) = worst;
            let donor = assignments[row] as usize;
            counts[donor] -= 1;
            counts[c] += 1;
            let p = &data[row * dim..(row + 1) * dim];
            for (j, v) in p.iter().enumerate() {
                sums[donor * dim + j] -= f64::from(*v);
                sums[c * dim + j] += f64::from(*v);
            }
            assignments[row] = c as u32;
        }

        let mut max_shift = 0f64;
        for c in 0..k {
            let denom = counts[c] as f64;
            let new_c: Vec<f32> =
                (0..dim).map(|j| (sums[c * dim + j] / denom) as f32).collect();
            let shift = squared_euclidean(&new_c, &centroids[c * dim..(c + 1) * dim]).sqrt();
            max_shift = max_shift.max(shift);
            centroids[c * dim..(c + 1) * dim].copy_from_slice(&new_c);
        }
        if max_shift < tol {
            break;
        }
    }

    // Final assignment against the settled centroids.
    let mut objective = 0.0;
    for (i, p) in data.chunks_exact(dim).enumerate() {
        let (c, d) = nearest_centroid(&centroids, dim, p);
        assignments[i] = c as u32;
        objective += d;
    }
    KmeansResult { centroids, assignments, objective, iterations }
}
