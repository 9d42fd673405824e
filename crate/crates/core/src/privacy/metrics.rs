//! Privacy dictionary, privacy-word hit precision/recall/F1 and corpus BLEU.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::is_reserved;
use crate::memstore::{ParallelCorpus, TokenId};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("{hypotheses} hypotheses but {references} references")]
    LengthMismatch { hypotheses: usize, references: usize },
    #[error("no hypotheses")]
    Empty,
    #[error("threshold must exceed 1, got {0}")]
    Threshold(f64),
}

/// Tokens markedly more frequent in a private corpus than in public data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyDictionary {
    pub tokens: BTreeSet<TokenId>,
    pub tau: f64,
}

impl PrivacyDictionary {
    pub fn contains(&self, t: TokenId) -> bool {
        self.tokens.contains(&t)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Keeps only dictionary tokens, in order.
    pub fn filter(&self, seq: &[TokenId]) -> Vec<TokenId> {
        seq.iter().copied().filter(|t| self.contains(*t)).collect()
    }
}

pub const DEFAULT_TAU: f64 = 2.0;

/// Non-reserved token occurrences on both sides of every pair.
pub fn token_counts(corpus: &ParallelCorpus) -> BTreeMap<TokenId, usize> {
    let mut counts = BTreeMap::new();
    for p in &corpus.pairs {
        for &t in p.src.iter().chain(&p.tgt) {
            if !is_reserved(t) {
                *counts.entry(t).or_insert(0) += 1;
            }
        }
    }
    counts
}

/// Selects `t` when `(c_priv(t) / n_priv) / ((c_pub(t) + 1) / n_pub) ≥ τ`,
/// frequencies being occurrences per sentence pair.
pub fn dictionary_from_counts(
    private: &BTreeMap<TokenId, usize>,
    n_private: usize,
    public: &BTreeMap<TokenId, usize>,
    n_public: usize,
    tau: f64,
) -> Result<PrivacyDictionary, MetricError> {
    if !(tau > 1.0 && tau.is_finite()) {
        return Err(MetricError::Threshold(tau));
    }
    let n_priv = n_private.max(1) as f64;
    let n_pub = n_public.max(1) as f64;
    let tokens = private
        .iter()
        .filter(|(t, &c)| {
            let pub_c = public.get(t).copied().unwrap_or(0) as f64;
            (c as f64 / n_priv) / ((pub_c + 1.0) / n_pub) >= tau
        })
        .map(|(t, _)| *t)
        .collect();
    Ok(PrivacyDictionary { tokens, tau })
}

pub fn extract_privacy_dictionary(
    private: &ParallelCorpus,
    public: &ParallelCorpus,
    tau: f64,
) -> Result<PrivacyDictionary, MetricError> {
    dictionary_from_counts(
        &token_counts(private),
        private.len(),
        &token_counts(public),
        public.len(),
        tau,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Privacy-word hits: with `h`, `g` the dictionary-filtered hypothesis and
/// reference, precision counts reference tokens found in their hypothesis
/// over `Σ|h|`, recall counts hypothesis tokens found in their reference over
/// `Σ|g|`. Every occurrence counts; empty denominators give 0.
pub fn privacy_prf(
    hypotheses: &[Vec<TokenId>],
    references: &[Vec<TokenId>],
    dict: &PrivacyDictionary,
) -> Result<Prf, MetricError> {
    if hypotheses.len() != references.len() {
        return Err(MetricError::LengthMismatch {
            hypotheses: hypotheses.len(),
            references: references.len(),
        });
    }
    let (mut p_num, mut p_den, mut r_num, mut r_den) = (0usize, 0usize, 0usize, 0usize);
    for (h, g) in hypotheses.iter().zip(references) {
        let h = dict.filter(h);
        let g = dict.filter(g);
        p_num += g.iter().filter(|t| h.contains(t)).count();
        r_num += h.iter().filter(|t| g.contains(t)).count();
        p_den += h.len();
        r_den += g.len();
    }
    let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    let precision = ratio(p_num, p_den);
    let recall = ratio(r_num, r_den);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Prf { precision, recall, f1 })
}

fn ngram_counts(seq: &[TokenId], n: usize) -> HashMap<&[TokenId], usize> {
    let mut out = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus BLEU-4 (uniform weights, clipped counts, brevity penalty, no
/// smoothing) as a percentage.
pub fn reconstruction_bleu(hypotheses: &[Vec<TokenId>], references: &[Vec<TokenId>]) -> Result<f64, MetricError> {
    if hypotheses.is_empty() {
        return Err(MetricError::Empty);
    }
    if hypotheses.len() != references.len() {
        return Err(MetricError::LengthMismatch {
            hypotheses: hypotheses.len(),
            references: references.len(),
        });
    }
    let mut matched = [0usize; 4];
    let mut possible = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matched[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            possible[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = matched
        .iter()
        .zip(&possible)
        .map(|(&m, &p)| (m as f64 / p as f64).ln())
        .sum::<f64>()
        / 4.0;
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * log_p.exp())
}
