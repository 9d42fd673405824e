//! Key-value translation memories.
//!
//! A [`Datastore`] holds one record per target token of a parallel corpus:
//! the decoder context produced by a [`SequenceModel`] for the prefix is the
//! key, the gold next token is the value.
//!
//! Stores serialize to the `FNDS` layout:
//!
//! ```text
//! magic "FNDS" | version u32 | dim u32 | count u32 | count × (dim × f32, u32 token)
//! ```
//!
//! All integers and floats are little-endian.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{ModelError, SequenceModel};
use crate::par;

/// Index into the shared vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u32> for TokenId {
    fn from(v: u32) -> Self {
        TokenId(v)
    }
}

/// Decoder context vector used as a datastore key.
pub type KeyVector = Vec<f32>;

/// One (source, target) sentence pair. Targets end with the EOS token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SentencePair {
    pub src: Vec<TokenId>,
    pub tgt: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelCorpus {
    pub domain: String,
    pub vocab_size: usize,
    pub pairs: Vec<SentencePair>,
}

impl ParallelCorpus {
    pub fn new(domain: impl Into<String>, vocab_size: usize) -> Self {
        Self {
            domain: domain.into(),
            vocab_size,
            pairs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Total number of target tokens (EOS included), i.e. the datastore size.
    pub fn target_tokens(&self) -> usize {
        self.pairs.iter().map(|p| p.tgt.len()).sum()
    }

    pub fn validate(&self) -> Result<(), MemstoreError> {
        for (i, p) in self.pairs.iter().enumerate() {
            if p.tgt.is_empty() {
                return Err(MemstoreError::EmptyTarget(i));
            }
            if let Some(t) = p.src.iter().chain(&p.tgt).find(|t| t.index() >= self.vocab_size) {
                return Err(MemstoreError::TokenOutOfRange {
                    token: t.0,
                    vocab_size: self.vocab_size,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum MemstoreError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("truncated stream: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("trailing bytes after {count} records")]
    TrailingBytes { count: usize },
    #[error("key dimension {found} does not match store dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite key component in record {0}")]
    NonFinite(usize),
    #[error("pair {0} has an empty target sequence")]
    EmptyTarget(usize),
    #[error("token {token} outside vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },
    #[error("model vocabulary {model} does not match corpus vocabulary {corpus}")]
    VocabMismatch { model: usize, corpus: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Ordered collection of (key, value) memory records.
#[derive(Debug, Clone, PartialEq)]
pub struct Datastore {
    dim: usize,
    keys: Vec<f32>,
    values: Vec<TokenId>,
    /// Client tag for in-process bookkeeping. Never serialized.
    pub provenance: Option<u16>,
}

impl Datastore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            keys: Vec::new(),
            values: Vec::new(),
            provenance: None,
        }
    }

    pub fn with_capacity(dim: usize, n: usize) -> Self {
        Self {
            dim,
            keys: Vec::with_capacity(n * dim),
            values: Vec::with_capacity(n),
            provenance: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn push(&mut self, key: &[f32], value: TokenId) -> Result<(), MemstoreError> {
        if key.len() != self.dim {
            return Err(MemstoreError::DimensionMismatch {
                expected: self.dim,
                found: key.len(),
            });
        }
        if key.iter().any(|v| !v.is_finite()) {
            return Err(MemstoreError::NonFinite(self.len()));
        }
        self.keys.extend_from_slice(key);
        self.values.push(value);
        Ok(())
    }

    pub fn key(&self, i: usize) -> &[f32] {
        &self.keys[i * self.dim..(i + 1) * self.dim]
    }

    pub fn value(&self, i: usize) -> TokenId {
        self.values[i]
    }

    pub fn values(&self) -> &[TokenId] {
        &self.values
    }

    /// Flat row-major key matrix (`len × dim`).
    pub fn keys_flat(&self) -> &[f32] {
        &self.keys
    }

    pub fn records(&self) -> impl ExactSizeIterator<Item = (&[f32], TokenId)> + '_ {
        (0..self.len()).map(move |i| (self.key(i), self.values[i]))
    }

    /// Appends every record of `other`, keeping order.
    pub fn extend_from(&mut self, other: &Datastore) -> Result<(), MemstoreError> {
        if other.dim != self.dim {
            return Err(MemstoreError::DimensionMismatch {
                expected: self.dim,
                found: other.dim,
            });
        }
        self.keys.extend_from_slice(&other.keys);
        self.values.extend_from_slice(&other.values);
        Ok(())
    }

    pub fn serialized_len(&self) -> usize {
        HEADER_LEN + self.len() * (self.dim * 4 + 4)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.serialized_len());
        out.extend_from_slice(DATASTORE_MAGIC);
        out.extend_from_slice(&DATASTORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (key, value) in self.records() {
            for v in key {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&value.0.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, MemstoreError> {
        let mut r = ByteReader::new(bytes);
        let magic = r.array::<4>()?;
        if &magic != DATASTORE_MAGIC {
            return Err(MemstoreError::BadMagic {
                expected: *DATASTORE_MAGIC,
                found: magic,
            });
        }
        let version = r.u32()?;
        if version != DATASTORE_VERSION {
            return Err(MemstoreError::VersionMismatch {
                expected: DATASTORE_VERSION,
                found: version,
            });
        }
        let dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        let needed = count.checked_mul(dim * 4 + 4).ok_or(MemstoreError::Truncated {
            needed: usize::MAX,
            available: r.remaining(),
        })?;
        if r.remaining() < needed {
            return Err(MemstoreError::Truncated {
                needed: HEADER_LEN + needed,
                available: bytes.len(),
            });
        }
        let mut store = Datastore::with_capacity(dim, count);
        for _ in 0..count {
            for _ in 0..dim {
                store.keys.push(r.f32()?);
            }
            store.values.push(TokenId(r.u32()?));
        }
        if r.remaining() != 0 {
            return Err(MemstoreError::TrailingBytes { count });
        }
        Ok(store)
    }
}

pub const DATASTORE_MAGIC: &[u8; 4] = b"FNDS";
pub const DATASTORE_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

/// Builds the datastore of `corpus` under `model`: one record per target
/// token, in corpus order then timestep order.
pub fn build_datastore<M: SequenceModel + ?Sized>(
    model: &M,
    corpus: &ParallelCorpus,
) -> Result<Datastore, MemstoreError> {
    if model.vocab_size() != corpus.vocab_size {
        return Err(MemstoreError::VocabMismatch {
            model: model.vocab_size(),
            corpus: corpus.vocab_size,
        });
    }
    let dim = model.dim();
    let per_pair = par::try_map(&corpus.pairs, |pair| {
        (0..pair.tgt.len())
            .map(|t| {
                let key = model.context(&pair.src, &pair.tgt[..t])?;
                if key.len() != dim {
                    return Err(MemstoreError::DimensionMismatch {
                        expected: dim,
                        found: key.len(),
                    });
                }
                Ok(key)
            })
            .collect::<Result<Vec<_>, _>>()
    })?;
    let mut store = Datastore::with_capacity(dim, corpus.target_tokens());
    for (pair, keys) in corpus.pairs.iter().zip(per_pair) {
        for (key, &value) in keys.iter().zip(&pair.tgt) {
            store.push(key, value)?;
        }
    }
    Ok(store)
}

/// Little-endian cursor shared by the binary formats in this crate.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], MemstoreError> {
        if self.remaining() < n {
            return Err(MemstoreError::Truncated {
                needed: self.pos + n,
                available: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn array<const N: usize>(&mut self) -> Result<[u8; N], MemstoreError> {
        let mut a = [0u8; N];
        a.copy_from_slice(self.take(N)?);
        Ok(a)
    }

    pub(crate) fn u16(&mut self) -> Result<u16, MemstoreError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, MemstoreError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub(crate) fn f32(&mut self) -> Result<f32, MemstoreError> {
        Ok(f32::from_le_bytes(self.array()?))
    }
}
