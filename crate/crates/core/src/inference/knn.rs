//! Retrieval sets, neighbour distributions and gate features.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memstore::TokenId;
use crate::quantizer::Neighbor;

#[derive(Debug, Error, PartialEq)]
pub enum InferenceError {
    #[error("empty neighbour set")]
    NoNeighbors,
    #[error("neighbour distances must be finite and non-decreasing (position {0})")]
    Unsorted(usize),
    #[error("token {token} outside vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },
    #[error("expected {expected} features, got {found}")]
    FeatureLength { expected: usize, found: usize },
    #[error("non-finite feature at position {0}")]
    NonFinite(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("network format: {0}")]
    Format(String),
}

/// How a neighbour's distance enters the kernel `exp(-f(d) / T)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKernel {
    /// `f(d) = d`, where `d` is already a squared L2 distance.
    #[default]
    Linear,
    /// `f(d) = d²`.
    Squared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaKConfig {
    /// Maximum neighbours `K`; a power of two.
    pub k_max: usize,
    pub hidden: usize,
    pub temperature: f64,
    /// Distance used to pad missing neighbours in the gate features.
    pub sentinel: f64,
    /// Divide distance features by `d₁ + 1e-6`.
    pub normalize_distances: bool,
    pub kernel: DistanceKernel,
}

impl Default for MetaKConfig {
    fn default() -> Self {
        Self {
            k_max: 8,
            hidden: 32,
            temperature: 10.0,
            sentinel: 10.0,
            normalize_distances: false,
            kernel: DistanceKernel::Linear,
        }
    }
}

impl MetaKConfig {
    pub fn validate(&self) -> Result<(), InferenceError> {
        if self.k_max == 0 || !self.k_max.is_power_of_two() {
            return Err(InferenceError::Config(format!(
                "K = {} is not a power of two",
                self.k_max
            )));
        }
        if self.hidden == 0 {
            return Err(InferenceError::Config("hidden size must be positive".into()));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(InferenceError::Config(format!("temperature {}", self.temperature)));
        }
        if !self.sentinel.is_finite() {
            return Err(InferenceError::Config("sentinel must be finite".into()));
        }
        Ok(())
    }

    /// Candidate retrieval sizes `{0, 1, 2, 4, ..., K}`.
    pub fn candidates(&self) -> Vec<usize> {
        let mut s = vec![0];
        let mut k = 1;
        while k <= self.k_max {
            s.push(k);
            k *= 2;
        }
        s
    }

    pub fn n_features(&self) -> usize {
        2 * self.k_max
    }
}

/// Neighbours in ascending distance order, with distinct-value counts.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RetrievalSet {
    neighbors: Vec<(f64, TokenId)>,
    distinct: Vec<usize>,
}

impl RetrievalSet {
    pub fn new(neighbors: Vec<(f64, TokenId)>) -> Result<Self, InferenceError> {
        for (i, (d, _)) in neighbors.iter().enumerate() {
            if !d.is_finite() || (i > 0 && *d < neighbors[i - 1].0) {
                return Err(InferenceError::Unsorted(i));
            }
        }
        let mut seen = Vec::new();
        let distinct = neighbors
            .iter()
            .map(|(_, v)| {
                if !seen.contains(v) {
                    seen.push(*v);
                }
                seen.len()
            })
            .collect();
        Ok(Self { neighbors, distinct })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_search(found: &[Neighbor]) -> Result<Self, InferenceError> {
        Self::new(found.iter().map(|n| (n.distance as f64, n.value)).collect())
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn neighbors(&self) -> &[(f64, TokenId)] {
        &self.neighbors
    }

    /// `c_i`: distinct values among the top `i + 1` neighbours.
    pub fn distinct_counts(&self) -> &[usize] {
        &self.distinct
    }

    /// First `k` neighbours, or all of them when fewer exist.
    pub fn top(&self, k: usize) -> &[(f64, TokenId)] {
        &self.neighbors[..k.min(self.neighbors.len())]
    }
}

/// `p(v) ∝ Σ_{i: v_i = v} exp(-f(d_i) / T)` over `vocab_size` tokens.
pub fn knn_distribution(
    neighbors: &[(f64, TokenId)],
    temperature: f64,
    kernel: DistanceKernel,
    vocab_size: usize,
) -> Result<Vec<f64>, InferenceError> {
    if neighbors.is_empty() {
        return Err(InferenceError::NoNeighbors);
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(InferenceError::Config(format!("temperature {temperature}")));
    }
    let f = |d: f64| match kernel {
        DistanceKernel::Linear => d,
        DistanceKernel::Squared => d * d,
    };
    // Shift by the smallest exponent so the largest weight is exactly 1.
    let shift = neighbors.iter().map(|(d, _)| f(*d)).fold(f64::INFINITY, f64::min);
    let mut out = vec![0.0; vocab_size];
    for (d, v) in neighbors {
        let slot = out
            .get_mut(v.index())
            .ok_or(InferenceError::TokenOutOfRange { token: v.0, vocab_size })?;
        *slot += (-(f(*d) - shift) / temperature).exp();
    }
    let z: f64 = out.iter().sum();
    for p in &mut out {
        *p /= z;
    }
    Ok(out)
}

/// Gate input `[d_1..d_K; c_1..c_K]`, padded to `K` entries.
pub fn meta_features(retrieval: &RetrievalSet, cfg: &MetaKConfig) -> Vec<f64> {
    let k = cfg.k_max;
    let scale = match (cfg.normalize_distances, retrieval.neighbors.first()) {
        (true, Some((d1, _))) => d1 + 1e-6,
        _ => 1.0,
    };
    let mut out = Vec::with_capacity(2 * k);
    for i in 0..k {
        out.push(match retrieval.neighbors.get(i) {
            Some((d, _)) => d / scale,
            None => cfg.sentinel,
        });
    }
    let last = retrieval.distinct.last().copied().unwrap_or(0);
    for i in 0..k {
        out.push(retrieval.distinct.get(i).copied().unwrap_or(last) as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: u32) -> TokenId {
        TokenId(v)
    }

    #[test]
    fn knn_examples() {
        let one = knn_distribution(&[(0.0, t(7))], 10.0, DistanceKernel::Linear, 10).unwrap();
        let mut want = vec![0.0; 10];
        want[7] = 1.0;
        assert_eq!(one, want);

        let two = knn_distribution(&[(1.5, t(2)), (1.5, t(5))], 10.0, DistanceKernel::Linear, 8).unwrap();
        assert_eq!(two[2], 0.5);
        assert_eq!(two[5], 0.5);

        let temp = 10.0;
        let p = knn_distribution(
            &[(0.0, t(1)), (temp * 3f64.ln(), t(3))],
            temp,
            DistanceKernel::Linear,
            4,
        )
        .unwrap();
        assert!((p[1] - 0.75).abs() < 1e-12);
        assert!((p[3] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn knn_errors() {
        assert_eq!(
            knn_distribution(&[], 1.0, DistanceKernel::Linear, 4),
            Err(InferenceError::NoNeighbors)
        );
        assert!(matches!(
            knn_distribution(&[(0.0, t(9))], 1.0, DistanceKernel::Linear, 4),
            Err(InferenceError::TokenOutOfRange { token: 9, .. })
        ));
        assert!(knn_distribution(&[(0.0, t(0))], 0.0, DistanceKernel::Linear, 4).is_err());
    }

    #[test]
    fn squared_kernel_uses_square() {
        let temp = 2.0;
        let d = (temp * 3f64.ln()).sqrt();
        let p = knn_distribution(&[(0.0, t(0)), (d, t(1))], temp, DistanceKernel::Squared, 2).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn temperature_monotonicity() {
        let gap = |n: &[(f64, TokenId)], limit: &[f64], temp: f64| {
            let p = knn_distribution(n, temp, DistanceKernel::Linear, limit.len()).unwrap();
            p.iter().zip(limit).map(|(x, l)| (x - l).abs()).sum::<f64>()
        };
        let distinct = [(0.1, t(0)), (0.7, t(1)), (3.0, t(2))];
        let uniform = [1.0 / 3.0; 3];
        let g: Vec<f64> = [1.0, 10.0, 1e6]
            .iter()
            .map(|&tt| gap(&distinct, &uniform, tt))
            .collect();
        assert!(g[0] > g[1] && g[1] > g[2] && g[2] < 1e-5, "{g:?}");

        // A repeated value keeps its multiplicity in the limit.
        let repeated = [(0.1, t(0)), (0.7, t(1)), (2.0, t(1)), (3.0, t(2))];
        let limit = [0.25, 0.5, 0.25];
        let g: Vec<f64> = [1.0, 10.0, 1e6].iter().map(|&tt| gap(&repeated, &limit, tt)).collect();
        assert!(g[0] > g[1] && g[1] > g[2] && g[2] < 1e-5, "{g:?}");
    }

    #[test]
    fn feature_examples() {
        let cfg = MetaKConfig {
            k_max: 2,
            ..MetaKConfig::default()
        };
        let same = RetrievalSet::new(vec![(1.0, t(4)), (2.0, t(4))]).unwrap();
        assert_eq!(meta_features(&same, &cfg), vec![1.0, 2.0, 1.0, 1.0]);
        let diff = RetrievalSet::new(vec![(1.0, t(4)), (2.0, t(5))]).unwrap();
        assert_eq!(meta_features(&diff, &cfg), vec![1.0, 2.0, 1.0, 2.0]);

        let cfg4 = MetaKConfig {
            k_max: 4,
            sentinel: 99.0,
            ..MetaKConfig::default()
        };
        assert_eq!(
            meta_features(&diff, &cfg4),
            vec![1.0, 2.0, 99.0, 99.0, 1.0, 2.0, 2.0, 2.0]
        );
        let norm = MetaKConfig {
            normalize_distances: true,
            ..cfg
        };
        let f = meta_features(&RetrievalSet::new(vec![(2.0, t(1)), (4.0, t(2))]).unwrap(), &norm);
        assert!((f[0] - 1.0).abs() < 1e-6 && (f[1] - 2.0).abs() < 1e-5);
    }

    #[test]
    fn candidate_sets() {
        let c = |k| {
            MetaKConfig {
                k_max: k,
                ..MetaKConfig::default()
            }
            .candidates()
        };
        assert_eq!(c(8), vec![0, 1, 2, 4, 8]);
        assert_eq!(c(1), vec![0, 1]);
        for k in [1usize, 2, 4, 16, 64] {
            assert_eq!(c(k).len(), k.trailing_zeros() as usize + 2);
        }
        let bad = MetaKConfig {
            k_max: 6,
            ..MetaKConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn retrieval_rejects_unsorted() {
        assert_eq!(
            RetrievalSet::new(vec![(2.0, t(0)), (1.0, t(1))]),
            Err(InferenceError::Unsorted(1))
        );
        assert!(RetrievalSet::new(vec![(f64::NAN, t(0))]).is_err());
    }

    fn neighbor_sets() -> impl Strategy<Value = Vec<(f64, TokenId)>> {
        prop::collection::vec((0.0f64..5.0, 0u32..12), 1..16).prop_map(|mut v| {
            v.sort_by(|a, b| a.0.total_cmp(&b.0));
            v.into_iter().map(|(d, x)| (d, TokenId(x))).collect()
        })
    }

    proptest! {
        #[test]
        fn knn_is_a_distribution(n in neighbor_sets(), temp in 0.01f64..100.0) {
            let p = knn_distribution(&n, temp, DistanceKernel::Linear, 12).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            for (v, &x) in p.iter().enumerate() {
                let present = n.iter().any(|(_, t)| t.index() == v);
                prop_assert_eq!(present, x > 0.0);
            }
        }

        #[test]
        fn distinct_counts_invariants(n in neighbor_sets()) {
            let r = RetrievalSet::new(n).unwrap();
            let c = r.distinct_counts();
            prop_assert_eq!(c[0], 1);
            for i in 0..c.len() {
                prop_assert!(c[i] <= i + 1);
                if i > 0 {
                    prop_assert!(c[i] >= c[i - 1]);
                }
            }
        }
    }
}
