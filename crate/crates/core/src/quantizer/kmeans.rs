//! Seeded Lloyd k-means with k-means++ seeding.
//!
//! Assignment runs through [`crate::par`]; all reductions happen in point
//! order, so results do not depend on the execution mode.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::par;

#[derive(Debug, Clone)]
pub struct KMeans {
    pub dim: usize,
    pub k: usize,
    /// Row-major `k × dim`.
    pub centroids: Vec<f32>,
    pub assignments: Vec<u32>,
    /// Sum of squared distances after each assignment step.
    pub objective_history: Vec<f64>,
}

impl KMeans {
    pub fn centroid(&self, i: usize) -> &[f32] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    pub fn objective(&self) -> f64 {
        *self.objective_history.last().unwrap_or(&0.0)
    }
}

#[inline]
pub(crate) fn sq_l2_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum()
}

/// Nearest row of `centroids` to `x`; ties go to the lowest index.
pub(crate) fn nearest(centroids: &[f32], dim: usize, x: &[f32]) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (i, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_l2_f64(c, x);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Clusters the `n × dim` row-major matrix `data` into `k` groups.
///
/// Panics if `data` has fewer than `k` rows; callers validate sizes.
pub fn kmeans(data: &[f32], dim: usize, k: usize, iters: usize, seed: u64) -> KMeans {
    assert!(dim > 0 && k > 0);
    let n = data.len() / dim;
    assert!(n >= k, "k-means needs at least k points");
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding.
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..n);
    centroids.extend_from_slice(row(first));
    let mut d2: Vec<f64> = par::map_range(n, |i| sq_l2_f64(row(i), row(first)));
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centroids.extend_from_slice(row(pick));
        let c = row(pick);
        let updated = par::map_range(n, |i| sq_l2_f64(row(i), c));
        for (a, b) in d2.iter_mut().zip(updated) {
            if b < *a {
                *a = b;
            }
        }
    }

    let assign = |centroids: &[f32]| -> Vec<(usize, f64)> { par::map_range(n, |i| nearest(centroids, dim, row(i))) };

    let mut current = assign(&centroids);
    let mut history = vec![current.iter().map(|a| a.1).sum::<f64>()];
    for _ in 0..iters {
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &(c, _)) in current.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row(i)) {
                *s += f64::from(*v);
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids[c * dim..(c + 1) * dim]
                    .iter_mut()
                    .zip(&sums[c * dim..(c + 1) * dim])
                {
                    *dst = (s * inv) as f32;
                }
            }
        }
        // Empty clusters move onto the point farthest from its centroid.
        let mut dist: Vec<f64> = current.iter().map(|a| a.1).collect();
        for c in 0..k {
            if counts[c] == 0 {
                let (far, _) =
                    dist.iter().enumerate().fold(
                        (0usize, f64::NEG_INFINITY),
                        |best, (i, &d)| if d > best.1 { (i, d) } else { best },
                    );
                centroids[c * dim..(c + 1) * dim].copy_from_slice(row(far));
                dist[far] = 0.0;
            }
        }

        let next = assign(&centroids);
        history.push(next.iter().map(|a| a.1).sum());
        let converged = next.iter().zip(&current).all(|(a, b)| a.0 == b.0);
        current = next;
        if converged && counts.iter().all(|&c| c > 0) {
            break;
        }
    }

    KMeans {
        dim,
        k,
        centroids,
        assignments: current.iter().map(|a| a.0 as u32).collect(),
        objective_history: history,
    }
}
