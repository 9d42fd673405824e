//! Client data partitioners for the Non-IID / IID / α-mix / client-scale
//! settings.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memstore::ParallelCorpus;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    /// Client `c` holds domain `c`.
    NonIid,
    /// All domains pooled and dealt out in equal shares.
    Iid,
    /// Each domain donates an α-fraction to a pool shared equally by all clients.
    AlphaMix,
    /// Each domain split into `n_clients / n_domains` equal shards.
    ClientScale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    pub n_clients: usize,
    pub alpha: f64,
    /// Per-domain subsampling ratio applied before partitioning.
    pub beta: Option<f64>,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn non_iid(n_clients: usize, seed: u64) -> Self {
        Self {
            mode: PartitionMode::NonIid,
            n_clients,
            alpha: 0.0,
            beta: None,
            seed,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PartitionError {
    #[error("n_clients must be at least 1")]
    NoClients,
    #[error("alpha {0} outside [0, 1]")]
    Alpha(f64),
    #[error("beta {0} outside (0, 1]")]
    Beta(f64),
    #[error("{mode:?} needs {expected} clients for {domains} domains, got {got}")]
    ClientCount {
        mode: PartitionMode,
        domains: usize,
        expected: String,
        got: usize,
    },
    #[error("domains disagree on vocabulary size")]
    Vocab,
}

/// Result of partitioning: per-client corpora plus, for each client pair,
/// its origin as `(domain index, pair index)` in the input.
#[derive(Debug, Clone)]
pub struct Partition {
    pub clients: Vec<ParallelCorpus>,
    pub origins: Vec<Vec<(usize, usize)>>,
}

impl Partition {
    pub fn total_pairs(&self) -> usize {
        self.clients.iter().map(|c| c.len()).sum()
    }
}

/// Splits `n` items into `parts` shares: `n / parts` each, remainder one at a
/// time to the lowest-indexed shares.
pub fn even_shares(n: usize, parts: usize) -> Vec<usize> {
    let base = n / parts;
    let rem = n % parts;
    (0..parts).map(|i| base + usize::from(i < rem)).collect()
}

/// Client sizes an α-mix partition produces for domains of the given sizes.
pub fn alpha_mix_sizes(domain_sizes: &[usize], alpha: f64) -> Vec<usize> {
    let drawn: Vec<usize> = domain_sizes
        .iter()
        .map(|&n| (alpha * n as f64).floor() as usize)
        .collect();
    let pool: usize = drawn.iter().sum();
    let shares = even_shares(pool, domain_sizes.len());
    domain_sizes
        .iter()
        .zip(&drawn)
        .zip(shares)
        .map(|((n, d), s)| n - d + s)
        .collect()
}

pub fn partition(domains: &[ParallelCorpus], spec: &PartitionSpec) -> Result<Partition, PartitionError> {
    if spec.n_clients == 0 {
        return Err(PartitionError::NoClients);
    }
    if !(0.0..=1.0).contains(&spec.alpha) {
        return Err(PartitionError::Alpha(spec.alpha));
    }
    if let Some(b) = spec.beta {
        if !(b > 0.0 && b <= 1.0) {
            return Err(PartitionError::Beta(b));
        }
    }
    let vocab = domains.first().map(|d| d.vocab_size).unwrap_or(0);
    if domains.iter().any(|d| d.vocab_size != vocab) {
        return Err(PartitionError::Vocab);
    }
    let n_dom = domains.len();
    let count_err = |expected: String| PartitionError::ClientCount {
        mode: spec.mode,
        domains: n_dom,
        expected,
        got: spec.n_clients,
    };
    match spec.mode {
        PartitionMode::NonIid | PartitionMode::AlphaMix if spec.n_clients != n_dom => {
            return Err(count_err(n_dom.to_string()));
        }
        PartitionMode::ClientScale if n_dom == 0 || !spec.n_clients.is_multiple_of(n_dom) => {
            return Err(count_err(format!("a multiple of {n_dom}")));
        }
        _ => {}
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // β subsampling: keep a random floor(β·n) subset of each domain, in order.
    let kept: Vec<Vec<(usize, usize)>> = domains
        .iter()
        .enumerate()
        .map(|(d, corpus)| {
            let mut idx: Vec<usize> = (0..corpus.len()).collect();
            if let Some(beta) = spec.beta {
                idx.shuffle(&mut rng);
                idx.truncate((beta * corpus.len() as f64).floor() as usize);
                idx.sort_unstable();
            }
            idx.into_iter().map(|i| (d, i)).collect()
        })
        .collect();

    let origins: Vec<Vec<(usize, usize)>> = match spec.mode {
        PartitionMode::NonIid => kept,
        PartitionMode::Iid => {
            let mut pool: Vec<(usize, usize)> = kept.into_iter().flatten().collect();
            pool.shuffle(&mut rng);
            deal(&pool, spec.n_clients)
        }
        PartitionMode::AlphaMix => {
            let mut own = Vec::with_capacity(n_dom);
            let mut pool = Vec::new();
            for mut items in kept {
                items.shuffle(&mut rng);
                let drawn = (spec.alpha * items.len() as f64).floor() as usize;
                pool.extend_from_slice(&items[..drawn]);
                own.push(items[drawn..].to_vec());
            }
            pool.shuffle(&mut rng);
            own.into_iter()
                .zip(deal(&pool, spec.n_clients))
                .map(|(mut mine, share)| {
                    mine.extend(share);
                    mine
                })
                .collect()
        }
        PartitionMode::ClientScale => {
            let per_domain = spec.n_clients / n_dom;
            kept.into_iter()
                .flat_map(|mut items| {
                    items.shuffle(&mut rng);
                    deal(&items, per_domain)
                })
                .collect()
        }
    };

    let clients = origins
        .iter()
        .enumerate()
        .map(|(c, items)| {
            let mut corpus = ParallelCorpus::new(format!("client{c}"), vocab);
            corpus.pairs = items.iter().map(|&(d, i)| domains[d].pairs[i].clone()).collect();
            corpus
        })
        .collect();
    Ok(Partition { clients, origins })
}

fn deal<T: Clone>(items: &[T], parts: usize) -> Vec<Vec<T>> {
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for n in even_shares(items.len(), parts) {
        out.push(items[start..start + n].to_vec());
        start += n;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::make_domain_corpus;
    use proptest::prelude::*;

    fn domains(sizes: &[usize]) -> Vec<ParallelCorpus> {
        sizes
            .iter()
            .enumerate()
            .map(|(d, &n)| make_domain_corpus(d as u32 + 1, n, 7, 32, 1..=3))
            .collect()
    }

    fn spec(mode: PartitionMode, n: usize, alpha: f64) -> PartitionSpec {
        PartitionSpec {
            mode,
            n_clients: n,
            alpha,
            beta: None,
            seed: 3,
        }
    }

    #[test]
    fn alpha_zero_is_non_iid() {
        let ds = domains(&[10, 20, 30]);
        let p = partition(&ds, &spec(PartitionMode::AlphaMix, 3, 0.0)).unwrap();
        for (c, d) in p.clients.iter().zip(&ds) {
            let mut a = c.pairs.clone();
            let mut b = d.pairs.clone();
            a.sort_by(|x, y| x.src.cmp(&y.src).then(x.tgt.cmp(&y.tgt)));
            b.sort_by(|x, y| x.src.cmp(&y.src).then(x.tgt.cmp(&y.tgt)));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn paper_scale_alpha_mix_size() {
        let sizes = alpha_mix_sizes(&[222_927, 248_009, 467_309], 0.6);
        assert_eq!(sizes[0], 276_820);
        assert_eq!(sizes.iter().sum::<usize>(), 222_927 + 248_009 + 467_309);
    }

    #[test]
    fn sizes_helper_agrees_with_partition() {
        let ds = domains(&[13, 27, 41]);
        let p = partition(&ds, &spec(PartitionMode::AlphaMix, 3, 0.4)).unwrap();
        let got: Vec<usize> = p.clients.iter().map(|c| c.len()).collect();
        assert_eq!(got, alpha_mix_sizes(&[13, 27, 41], 0.4));
    }

    #[test]
    fn client_scale_shards_each_domain() {
        let ds = domains(&[12, 12, 12]);
        let p = partition(&ds, &spec(PartitionMode::ClientScale, 6, 0.0)).unwrap();
        assert_eq!(p.clients.len(), 6);
        for (c, o) in p.origins.iter().enumerate() {
            assert_eq!(o.len(), 6);
            assert!(o.iter().all(|(d, _)| *d == c / 2));
        }
    }

    #[test]
    fn iid_equal_shares() {
        let ds = domains(&[10, 11, 12]);
        let p = partition(&ds, &spec(PartitionMode::Iid, 4, 0.0)).unwrap();
        let sizes: Vec<usize> = p.clients.iter().map(|c| c.len()).collect();
        assert_eq!(sizes, vec![9, 8, 8, 8]);
    }

    #[test]
    fn beta_subsamples_before_partitioning() {
        let ds = domains(&[10, 20, 30]);
        let mut s = spec(PartitionMode::NonIid, 3, 0.0);
        s.beta = Some(0.5);
        let p = partition(&ds, &s).unwrap();
        assert_eq!(p.clients.iter().map(|c| c.len()).collect::<Vec<_>>(), vec![5, 10, 15]);
    }

    #[test]
    fn invalid_specs() {
        let ds = domains(&[2, 2, 2]);
        assert_eq!(
            partition(&ds, &spec(PartitionMode::NonIid, 0, 0.0)).unwrap_err(),
            PartitionError::NoClients
        );
        assert!(matches!(
            partition(&ds, &spec(PartitionMode::NonIid, 2, 0.0)),
            Err(PartitionError::ClientCount { .. })
        ));
        assert!(matches!(
            partition(&ds, &spec(PartitionMode::ClientScale, 4, 0.0)),
            Err(PartitionError::ClientCount { .. })
        ));
        assert_eq!(
            partition(&ds, &spec(PartitionMode::AlphaMix, 3, 1.5)).unwrap_err(),
            PartitionError::Alpha(1.5)
        );
        let mut s = spec(PartitionMode::Iid, 3, 0.0);
        s.beta = Some(0.0);
        assert_eq!(partition(&ds, &s).unwrap_err(), PartitionError::Beta(0.0));
    }

    proptest! {
        #[test]
        fn conservation_disjointness_determinism(
            a in 0usize..40, b in 0usize..40, c in 0usize..40,
            alpha in 0.0f64..=1.0,
            mode in prop_oneof![
                Just(PartitionMode::NonIid), Just(PartitionMode::Iid),
                Just(PartitionMode::AlphaMix), Just(PartitionMode::ClientScale)
            ],
            seed in 0u64..100,
        ) {
            let ds = domains(&[a, b, c]);
            let n = if mode == PartitionMode::Iid || mode == PartitionMode::ClientScale { 6 } else { 3 };
            let s = PartitionSpec { mode, n_clients: n, alpha, beta: None, seed };
            let p = partition(&ds, &s).unwrap();
            prop_assert_eq!(p.total_pairs(), a + b + c);
            let mut all: Vec<(usize, usize)> = p.origins.iter().flatten().copied().collect();
            all.sort_unstable();
            let before = all.len();
            all.dedup();
            prop_assert_eq!(before, all.len());
            let again = partition(&ds, &s).unwrap();
            prop_assert_eq!(again.origins, p.origins);
        }
    }
}
