//! Synthetic translation domains and the plain-text corpus format.
//!
//! Each domain is a toy "language pair": source sentences are random walks
//! over a domain-specific band of the vocabulary, and the target is the
//! source mapped through a domain-owned permutation, followed by EOS.
//!
//! Corpus files hold one pair per line, `src_ids<TAB>tgt_ids`, each side a
//! space-separated list of integer token ids.

use std::io::{BufRead, Write};
use std::ops::RangeInclusive;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::memstore::{MemstoreError, ParallelCorpus, SentencePair, TokenId};

pub const EOS: TokenId = TokenId(0);
/// Language tag preceding the source in reconstruction targets.
pub const SRC_TAG: TokenId = TokenId(1);
/// Language tag preceding the target prefix in reconstruction targets.
pub const TGT_TAG: TokenId = TokenId(2);
/// Number of reserved ids at the bottom of every vocabulary.
pub const RESERVED: u32 = 3;

/// Probability that a source token is followed by its domain successor.
const FOLLOW_PROB: f64 = 0.85;
const LANGUAGE_SALT: u64 = 0x6c61_6e67_7561_6765;

pub fn is_reserved(t: TokenId) -> bool {
    t.0 < RESERVED
}

/// The fixed vocabulary structure of one synthetic domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainLanguage {
    pub domain: u32,
    /// Source tokens this domain draws from.
    pub band: Vec<TokenId>,
    /// Source-to-target mapping over all content tokens (indexed by token id).
    pub permutation: Vec<TokenId>,
    /// Preferred next source token for each band token (indexed by token id).
    pub successor: Vec<TokenId>,
}

impl DomainLanguage {
    /// Derives the language of `domain` from the domain id alone, so every
    /// split of the same domain shares one mapping.
    pub fn new(domain: u32, vocab_size: usize) -> Self {
        assert!(vocab_size > RESERVED as usize + 1, "vocabulary too small");
        let content: Vec<TokenId> = (RESERVED..vocab_size as u32).map(TokenId).collect();
        let n = content.len();
        let band_size = (n / 4).max(2).min(n);
        let start = (domain as usize * band_size) % n;
        let band: Vec<TokenId> = (0..band_size).map(|i| content[(start + i) % n]).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(LANGUAGE_SALT ^ u64::from(domain).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut shuffled = content.clone();
        shuffled.shuffle(&mut rng);
        let mut permutation: Vec<TokenId> = (0..vocab_size as u32).map(TokenId).collect();
        for (from, to) in content.iter().zip(&shuffled) {
            permutation[from.index()] = *to;
        }

        let mut cycle = band.clone();
        cycle.shuffle(&mut rng);
        let mut successor: Vec<TokenId> = (0..vocab_size as u32).map(TokenId).collect();
        for i in 0..cycle.len() {
            successor[cycle[i].index()] = cycle[(i + 1) % cycle.len()];
        }
        Self {
            domain,
            band,
            permutation,
            successor,
        }
    }

    pub fn translate(&self, src: &[TokenId]) -> Vec<TokenId> {
        let mut out: Vec<TokenId> = src.iter().map(|t| self.permutation[t.index()]).collect();
        out.push(EOS);
        out
    }
}

/// Generates `size` sentence pairs of `domain`. Deterministic in
/// `(domain, seed)`.
pub fn make_domain_corpus(
    domain: u32,
    size: usize,
    seed: u64,
    vocab_size: usize,
    len_range: RangeInclusive<usize>,
) -> ParallelCorpus {
    let lang = DomainLanguage::new(domain, vocab_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(domain) << 32));
    let mut corpus = ParallelCorpus::new(format!("domain{domain}"), vocab_size);
    let lo = (*len_range.start()).max(1);
    let hi = (*len_range.end()).max(lo);
    for _ in 0..size {
        let len = rng.gen_range(lo..=hi);
        let mut src = Vec::with_capacity(len);
        let mut cur = *lang.band.choose(&mut rng).expect("non-empty band");
        src.push(cur);
        while src.len() < len {
            cur = if rng.gen_bool(FOLLOW_PROB) {
                lang.successor[cur.index()]
            } else {
                *lang.band.choose(&mut rng).expect("non-empty band")
            };
            src.push(cur);
        }
        let tgt = lang.translate(&src);
        corpus.pairs.push(SentencePair { src, tgt });
    }
    corpus
}

pub fn write_corpus<W: Write>(corpus: &ParallelCorpus, mut out: W) -> std::io::Result<()> {
    let join = |v: &[TokenId]| v.iter().map(|t| t.0.to_string()).collect::<Vec<_>>().join(" ");
    for p in &corpus.pairs {
        writeln!(out, "{}\t{}", join(&p.src), join(&p.tgt))?;
    }
    Ok(())
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Invalid(#[from] MemstoreError),
}

pub fn read_corpus<R: BufRead>(
    input: R,
    domain: impl Into<String>,
    vocab_size: usize,
) -> Result<ParallelCorpus, CorpusError> {
    let mut corpus = ParallelCorpus::new(domain, vocab_size);
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (src, tgt) = line.split_once('\t').ok_or_else(|| CorpusError::Parse {
            line: i + 1,
            msg: "missing tab separator".into(),
        })?;
        let parse = |s: &str| -> Result<Vec<TokenId>, CorpusError> {
            s.split_whitespace()
                .map(|w| {
                    w.parse::<u32>().map(TokenId).map_err(|e| CorpusError::Parse {
                        line: i + 1,
                        msg: format!("bad token {w:?}: {e}"),
                    })
                })
                .collect()
        };
        corpus.pairs.push(SentencePair {
            src: parse(src)?,
            tgt: parse(tgt)?,
        });
    }
    corpus.validate()?;
    Ok(corpus)
}
