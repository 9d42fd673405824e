//! Inverted-file product quantizer: the key-encryption model.
//!
//! Keys are first assigned to a coarse centroid; the residual is split into
//! `m` equal subspaces, each quantized against its own codebook of `2^bits`
//! entries. The serialized `FNPQ` layout is
//!
//! ```text
//! "FNPQ" | version u32 | dim u32 | m u32 | bits u32 | n_coarse u32
//! coarse centroids (n_coarse × dim f32) | codebooks (m × 2^bits × dim/m f32)
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::kmeans::{kmeans, nearest, sq_l2_f64};
use crate::memstore::{ByteReader, MemstoreError};
use crate::par;

pub const PQ_MAGIC: &[u8; 4] = b"FNPQ";
pub const PQ_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum QuantizerError {
    #[error("dimension {dim} not divisible by m = {m}")]
    Indivisible { dim: usize, m: usize },
    #[error("n_probe {n_probe} exceeds n_coarse {n_coarse}")]
    Probe { n_probe: usize, n_coarse: usize },
    #[error("bits must be in 1..=16, got {0}")]
    Bits(u32),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("need at least {needed} training keys, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("non-finite value in training key {0}")]
    NonFinite(usize),
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("code out of range: {0}")]
    CodeOutOfRange(String),
    #[error(transparent)]
    Format(#[from] MemstoreError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PQConfig {
    pub n_coarse: usize,
    pub m: usize,
    pub bits: u32,
    pub n_probe: usize,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for PQConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl PQConfig {
    /// Small-corpus defaults.
    pub fn desk() -> Self {
        Self {
            n_coarse: 64,
            m: 4,
            bits: 4,
            n_probe: 16,
            kmeans_iters: 25,
            seed: 0,
        }
    }

    /// IVF4096 with 64 probes, for datastores with millions of records.
    pub fn paper_scale() -> Self {
        Self {
            n_coarse: 4096,
            m: 64,
            bits: 8,
            n_probe: 64,
            kmeans_iters: 25,
            seed: 0,
        }
    }

    pub fn ksub(&self) -> usize {
        1 << self.bits
    }

    pub fn validate(&self, dim: usize) -> Result<(), QuantizerError> {
        if self.m == 0 || dim == 0 || !dim.is_multiple_of(self.m) {
            return Err(QuantizerError::Indivisible { dim, m: self.m });
        }
        if !(1..=16).contains(&self.bits) {
            return Err(QuantizerError::Bits(self.bits));
        }
        if self.n_coarse == 0 {
            return Err(QuantizerError::Config("n_coarse must be positive".into()));
        }
        if self.n_probe == 0 || self.n_probe > self.n_coarse {
            return Err(QuantizerError::Probe {
                n_probe: self.n_probe,
                n_coarse: self.n_coarse,
            });
        }
        Ok(())
    }
}

/// Coarse list id plus one sub-code per subspace.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EncodedKey {
    pub coarse_id: u32,
    pub subcodes: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PQModel {
    dim: usize,
    config: PQConfig,
    coarse: Vec<f32>,
    codebooks: Vec<f32>,
}

/// Trains the quantizer on a row-major `n × dim` sample of keys.
pub fn train_pq(keys: &[f32], dim: usize, config: &PQConfig) -> Result<PQModel, QuantizerError> {
    config.validate(dim)?;
    let n = keys.len() / dim;
    let needed = config.n_coarse.max(config.ksub());
    if n < needed {
        return Err(QuantizerError::InsufficientSamples { needed, got: n });
    }
    if let Some(i) = keys.iter().position(|v| !v.is_finite()) {
        return Err(QuantizerError::NonFinite(i / dim));
    }

    let coarse = kmeans(keys, dim, config.n_coarse, config.kmeans_iters, config.seed);
    let dsub = dim / config.m;
    let residuals: Vec<f32> = keys
        .chunks_exact(dim)
        .zip(&coarse.assignments)
        .flat_map(|(k, &c)| k.iter().zip(coarse.centroid(c as usize)).map(|(a, b)| a - b))
        .collect();

    let books = par::map_range(config.m, |j| {
        let sub: Vec<f32> = residuals
            .chunks_exact(dim)
            .flat_map(|r| r[j * dsub..(j + 1) * dsub].iter().copied())
            .collect();
        let seed = config
            .seed
            .wrapping_add(1 + j as u64)
            .wrapping_mul(0x9e37_79b9_7f4a_7c15);
        kmeans(&sub, dsub, config.ksub(), config.kmeans_iters, seed).centroids
    });

    Ok(PQModel {
        dim,
        config: config.clone(),
        coarse: coarse.centroids,
        codebooks: books.concat(),
    })
}

impl PQModel {
    /// Assembles a model from explicit centroids and codebooks.
    ///
    /// `coarse` is `n_coarse × dim`; `codebooks` is `m × 2^bits × dim/m`.
    pub fn from_parts(
        dim: usize,
        config: PQConfig,
        coarse: Vec<f32>,
        codebooks: Vec<f32>,
    ) -> Result<Self, QuantizerError> {
        config.validate(dim)?;
        if coarse.len() != config.n_coarse * dim {
            return Err(QuantizerError::Config(format!(
                "coarse table has {} floats, expected {}",
                coarse.len(),
                config.n_coarse * dim
            )));
        }
        if codebooks.len() != config.ksub() * dim {
            return Err(QuantizerError::Config(format!(
                "codebooks have {} floats, expected {}",
                codebooks.len(),
                config.ksub() * dim
            )));
        }
        if coarse.iter().chain(&codebooks).any(|v| !v.is_finite()) {
            return Err(QuantizerError::Config("non-finite centroid".into()));
        }
        Ok(Self {
            dim,
            config,
            coarse,
            codebooks,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn config(&self) -> &PQConfig {
        &self.config
    }

    pub fn m(&self) -> usize {
        self.config.m
    }

    pub fn dsub(&self) -> usize {
        self.dim / self.config.m
    }

    pub fn n_coarse(&self) -> usize {
        self.config.n_coarse
    }

    pub fn coarse_centroid(&self, i: usize) -> &[f32] {
        &self.coarse[i * self.dim..(i + 1) * self.dim]
    }

    pub fn codeword(&self, subspace: usize, code: usize) -> &[f32] {
        let dsub = self.dsub();
        let start = (subspace * self.config.ksub() + code) * dsub;
        &self.codebooks[start..start + dsub]
    }

    fn check_dim(&self, v: &[f32]) -> Result<(), QuantizerError> {
        if v.len() != self.dim {
            return Err(QuantizerError::DimensionMismatch {
                expected: self.dim,
                found: v.len(),
            });
        }
        Ok(())
    }

    pub fn validate_code(&self, code: &EncodedKey) -> Result<(), QuantizerError> {
        if code.coarse_id as usize >= self.config.n_coarse {
            return Err(QuantizerError::CodeOutOfRange(format!("coarse id {}", code.coarse_id)));
        }
        if code.subcodes.len() != self.config.m {
            return Err(QuantizerError::CodeOutOfRange(format!(
                "{} subcodes for m = {}",
                code.subcodes.len(),
                self.config.m
            )));
        }
        if let Some(s) = code.subcodes.iter().find(|&&s| s as usize >= self.config.ksub()) {
            return Err(QuantizerError::CodeOutOfRange(format!("subcode {s}")));
        }
        Ok(())
    }

    /// Nearest coarse centroid (ties to the lowest id).
    pub fn assign_coarse(&self, key: &[f32]) -> Result<u32, QuantizerError> {
        self.check_dim(key)?;
        Ok(nearest(&self.coarse, self.dim, key).0 as u32)
    }

    pub fn encode(&self, key: &[f32]) -> Result<EncodedKey, QuantizerError> {
        let coarse_id = self.assign_coarse(key)?;
        let c = self.coarse_centroid(coarse_id as usize);
        let residual: Vec<f32> = key.iter().zip(c).map(|(a, b)| a - b).collect();
        let dsub = self.dsub();
        let ksub = self.config.ksub();
        let subcodes = (0..self.config.m)
            .map(|j| {
                let book = &self.codebooks[j * ksub * dsub..(j + 1) * ksub * dsub];
                nearest(book, dsub, &residual[j * dsub..(j + 1) * dsub]).0 as u16
            })
            .collect();
        Ok(EncodedKey { coarse_id, subcodes })
    }

    /// Encodes every row of a row-major key matrix.
    pub fn encode_all(&self, keys: &[f32]) -> Result<Vec<EncodedKey>, QuantizerError> {
        if !keys.len().is_multiple_of(self.dim) {
            return Err(QuantizerError::DimensionMismatch {
                expected: self.dim,
                found: keys.len() % self.dim,
            });
        }
        let rows: Vec<&[f32]> = keys.chunks_exact(self.dim).collect();
        par::try_map(&rows, |k| self.encode(k))
    }

    /// Lossy reconstruction: coarse centroid plus the selected codewords.
    pub fn decode(&self, code: &EncodedKey) -> Result<Vec<f32>, QuantizerError> {
        self.validate_code(code)?;
        let c = self.coarse_centroid(code.coarse_id as usize);
        let dsub = self.dsub();
        let mut out = Vec::with_capacity(self.dim);
        for (j, &s) in code.subcodes.iter().enumerate() {
            let w = self.codeword(j, s as usize);
            out.extend(c[j * dsub..(j + 1) * dsub].iter().zip(w).map(|(a, b)| a + b));
        }
        Ok(out)
    }

    /// Per-subspace distance tables for `query` against coarse list `coarse_id`.
    pub fn lookup_tables(&self, query: &[f32], coarse_id: usize) -> Result<LookupTables, QuantizerError> {
        self.check_dim(query)?;
        if coarse_id >= self.config.n_coarse {
            return Err(QuantizerError::CodeOutOfRange(format!("coarse id {coarse_id}")));
        }
        let c = self.coarse_centroid(coarse_id);
        let residual: Vec<f32> = query.iter().zip(c).map(|(a, b)| a - b).collect();
        let dsub = self.dsub();
        let ksub = self.config.ksub();
        let mut table = Vec::with_capacity(self.config.m * ksub);
        for j in 0..self.config.m {
            let r = &residual[j * dsub..(j + 1) * dsub];
            for s in 0..ksub {
                table.push(sq_l2_f64(r, self.codeword(j, s)));
            }
        }
        Ok(LookupTables { ksub, table })
    }

    /// Asymmetric squared distance between a raw query and a code.
    pub fn adc_distance(&self, query: &[f32], code: &EncodedKey) -> Result<f32, QuantizerError> {
        self.validate_code(code)?;
        let t = self.lookup_tables(query, code.coarse_id as usize)?;
        Ok(t.distance(&code.subcodes) as f32)
    }

    pub fn serialized_len(&self) -> usize {
        24 + 4 * (self.coarse.len() + self.codebooks.len())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.serialized_len());
        out.extend_from_slice(PQ_MAGIC);
        for v in [
            PQ_VERSION,
            self.dim as u32,
            self.config.m as u32,
            self.config.bits,
            self.config.n_coarse as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.coarse.iter().chain(&self.codebooks) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses an `FNPQ` blob. Search-time settings not stored in the header
    /// (`n_probe`, training iterations, seed) take desk defaults.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, QuantizerError> {
        let mut r = ByteReader::new(bytes);
        let magic = r.array::<4>()?;
        if &magic != PQ_MAGIC {
            return Err(MemstoreError::BadMagic {
                expected: *PQ_MAGIC,
                found: magic,
            }
            .into());
        }
        let version = r.u32()?;
        if version != PQ_VERSION {
            return Err(MemstoreError::VersionMismatch {
                expected: PQ_VERSION,
                found: version,
            }
            .into());
        }
        let dim = r.u32()? as usize;
        let m = r.u32()? as usize;
        let bits = r.u32()?;
        let n_coarse = r.u32()? as usize;
        let desk = PQConfig::desk();
        let config = PQConfig {
            n_coarse,
            m,
            bits,
            n_probe: desk.n_probe.min(n_coarse).max(1),
            ..desk
        };
        config.validate(dim)?;
        let read =
            |r: &mut ByteReader, n: usize| -> Result<Vec<f32>, MemstoreError> { (0..n).map(|_| r.f32()).collect() };
        let coarse = read(&mut r, n_coarse * dim)?;
        let codebooks = read(&mut r, config.ksub() * dim)?;
        if r.remaining() != 0 {
            return Err(QuantizerError::Config("trailing bytes after codebooks".into()));
        }
        Self::from_parts(dim, config, coarse, codebooks)
    }
}

/// `m × 2^bits` table of squared sub-distances for one (query, coarse list).
#[derive(Debug, Clone)]
pub struct LookupTables {
    ksub: usize,
    table: Vec<f64>,
}

impl LookupTables {
    #[inline]
    pub fn distance(&self, subcodes: &[u16]) -> f64 {
        subcodes
            .iter()
            .enumerate()
            .map(|(j, &s)| self.table[j * self.ksub + s as usize])
            .sum()
    }
}
