//! Inverted-file index over encoded keys and the encoded datastore format.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use thiserror::Error;

use super::pq::{EncodedKey, PQModel, QuantizerError};
use crate::memstore::{ByteReader, Datastore, MemstoreError, TokenId};
use crate::par;

#[derive(Debug, Error)]
pub enum SearchError {
    /// The index holds no entries; callers fall back to the base model.
    #[error("index is empty")]
    EmptyIndex,
    #[error("k must be at least 1")]
    ZeroK,
    #[error(transparent)]
    Quantizer(#[from] QuantizerError),
}

/// One retrieved entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub distance: f32,
    pub value: TokenId,
    pub code: EncodedKey,
    /// Position of the entry in insertion order.
    pub seq: u32,
}

#[derive(Debug, Clone, Default)]
struct InvertedList {
    subcodes: Vec<u16>,
    values: Vec<TokenId>,
    seqs: Vec<u32>,
}

/// Searchable form of a global memory: the quantizer plus one inverted list
/// per coarse centroid.
#[derive(Debug, Clone)]
pub struct PQIndex {
    model: PQModel,
    lists: Vec<InvertedList>,
    len: usize,
}

#[derive(PartialEq)]
struct HeapItem {
    distance: f64,
    seq: u32,
    list: u32,
    pos: u32,
}

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        self.distance.total_cmp(&other.distance).then(self.seq.cmp(&other.seq))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PQIndex {
    pub fn build<I>(model: PQModel, entries: I) -> Result<Self, QuantizerError>
    where
        I: IntoIterator<Item = (EncodedKey, TokenId)>,
    {
        let mut lists = vec![InvertedList::default(); model.n_coarse()];
        let mut len = 0usize;
        for (code, value) in entries {
            model.validate_code(&code)?;
            let list = &mut lists[code.coarse_id as usize];
            list.subcodes.extend_from_slice(&code.subcodes);
            list.values.push(value);
            list.seqs.push(len as u32);
            len += 1;
        }
        Ok(Self { model, lists, len })
    }

    pub fn model(&self) -> &PQModel {
        &self.model
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn list_len(&self, coarse_id: usize) -> usize {
        self.lists[coarse_id].values.len()
    }

    /// The `n_probe` coarse lists nearest to `query`, nearest first.
    pub fn probe_order(&self, query: &[f32], n_probe: usize) -> Result<Vec<usize>, QuantizerError> {
        if query.len() != self.model.dim() {
            return Err(QuantizerError::DimensionMismatch {
                expected: self.model.dim(),
                found: query.len(),
            });
        }
        let mut d: Vec<(f64, usize)> = (0..self.model.n_coarse())
            .map(|c| {
                let cen = self.model.coarse_centroid(c);
                let dist = query
                    .iter()
                    .zip(cen)
                    .map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2))
                    .sum();
                (dist, c)
            })
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(d.into_iter()
            .take(n_probe.min(self.model.n_coarse()))
            .map(|x| x.1)
            .collect())
    }

    /// Up to `k` nearest entries by ADC distance among the `n_probe` nearest
    /// lists, ordered by (distance, insertion order).
    pub fn search(&self, query: &[f32], k: usize, n_probe: usize) -> Result<Vec<Neighbor>, SearchError> {
        if k == 0 {
            return Err(SearchError::ZeroK);
        }
        if self.is_empty() {
            return Err(SearchError::EmptyIndex);
        }
        let m = self.model.m();
        let mut heap: BinaryHeap<HeapItem> = BinaryHeap::with_capacity(k + 1);
        for list_id in self.probe_order(query, n_probe.max(1))? {
            let list = &self.lists[list_id];
            if list.values.is_empty() {
                continue;
            }
            let tables = self.model.lookup_tables(query, list_id)?;
            for (pos, codes) in list.subcodes.chunks_exact(m).enumerate() {
                let item = HeapItem {
                    distance: tables.distance(codes),
                    seq: list.seqs[pos],
                    list: list_id as u32,
                    pos: pos as u32,
                };
                if heap.len() < k {
                    heap.push(item);
                } else if item < *heap.peek().expect("heap is full") {
                    heap.pop();
                    heap.push(item);
                }
            }
        }
        Ok(heap
            .into_sorted_vec()
            .into_iter()
            .map(|h| {
                let list = &self.lists[h.list as usize];
                let p = h.pos as usize;
                Neighbor {
                    distance: h.distance as f32,
                    value: list.values[p],
                    code: EncodedKey {
                        coarse_id: h.list,
                        subcodes: list.subcodes[p * m..(p + 1) * m].to_vec(),
                    },
                    seq: h.seq,
                }
            })
            .collect())
    }

    /// Runs [`PQIndex::search`] for each row of a row-major query matrix.
    pub fn search_batch(&self, queries: &[f32], k: usize, n_probe: usize) -> Result<Vec<Vec<Neighbor>>, SearchError> {
        let rows: Vec<&[f32]> = queries.chunks_exact(self.model.dim()).collect();
        par::try_map(&rows, |q| self.search(q, k, n_probe))
    }
}

/// Key-encrypted datastore: `(EncodedKey, TokenId)` records in order.
///
/// One record on the wire is `coarse_id u32 | m × u16 subcode | token u32`.
/// A whole store serializes as `"FNEC" | version u32 | m u32 | count u32`
/// followed by the records.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EncodedStore {
    pub m: usize,
    pub entries: Vec<(EncodedKey, TokenId)>,
}

pub const ENCODED_STORE_MAGIC: &[u8; 4] = b"FNEC";

impl EncodedStore {
    pub fn new(m: usize) -> Self {
        Self { m, entries: Vec::new() }
    }

    /// Applies the key-encryption model to every key of `store`.
    pub fn encode(model: &PQModel, store: &Datastore) -> Result<Self, QuantizerError> {
        let codes = model.encode_all(store.keys_flat())?;
        Ok(Self {
            m: model.m(),
            entries: codes.into_iter().zip(store.values().iter().copied()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn record_len(m: usize) -> usize {
        8 + 2 * m
    }

    pub fn record_bytes(code: &EncodedKey, value: TokenId) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::record_len(code.subcodes.len()));
        out.extend_from_slice(&code.coarse_id.to_le_bytes());
        for s in &code.subcodes {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out.extend_from_slice(&value.0.to_le_bytes());
        out
    }

    pub fn parse_record(bytes: &[u8], m: usize) -> Result<(EncodedKey, TokenId), MemstoreError> {
        let mut r = ByteReader::new(bytes);
        let coarse_id = r.u32()?;
        let subcodes = (0..m).map(|_| r.u16()).collect::<Result<Vec<_>, _>>()?;
        let value = TokenId(r.u32()?);
        if r.remaining() != 0 {
            return Err(MemstoreError::TrailingBytes { count: 1 });
        }
        Ok((EncodedKey { coarse_id, subcodes }, value))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.len() * Self::record_len(self.m));
        out.extend_from_slice(ENCODED_STORE_MAGIC);
        for v in [1u32, self.m as u32, self.len() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (c, v) in &self.entries {
            out.extend_from_slice(&Self::record_bytes(c, *v));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, MemstoreError> {
        let mut r = ByteReader::new(bytes);
        let magic = r.array::<4>()?;
        if &magic != ENCODED_STORE_MAGIC {
            return Err(MemstoreError::BadMagic {
                expected: *ENCODED_STORE_MAGIC,
                found: magic,
            });
        }
        let version = r.u32()?;
        if version != 1 {
            return Err(MemstoreError::VersionMismatch {
                expected: 1,
                found: version,
            });
        }
        let m = r.u32()? as usize;
        let n = r.u32()? as usize;
        let rec = Self::record_len(m);
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            entries.push(Self::parse_record(r.take(rec)?, m)?);
        }
        if r.remaining() != 0 {
            return Err(MemstoreError::TrailingBytes { count: n });
        }
        Ok(Self { m, entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::{train_pq, PQConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(n: usize) -> (PQModel, Vec<f32>, Vec<(EncodedKey, TokenId)>) {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let keys: Vec<f32> = (0..n * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cfg = PQConfig {
            n_coarse: 8,
            m: 4,
            bits: 3,
            n_probe: 2,
            kmeans_iters: 10,
            seed: 1,
        };
        let model = train_pq(&keys, 8, &cfg).unwrap();
        let entries = model
            .encode_all(&keys)
            .unwrap()
            .into_iter()
            .enumerate()
            .map(|(i, c)| (c, TokenId(i as u32 % 11)))
            .collect();
        (model, keys, entries)
    }

    #[test]
    fn two_level_exact_codeword() {
        let cfg = PQConfig {
            n_coarse: 2,
            m: 1,
            bits: 1,
            n_probe: 1,
            kmeans_iters: 1,
            seed: 0,
        };
        let model = PQModel::from_parts(1, cfg, vec![0.0, 10.0], vec![0.0, 1.0]).unwrap();
        let code = model.encode(&[11.0]).unwrap();
        assert_eq!(
            code,
            EncodedKey {
                coarse_id: 1,
                subcodes: vec![1]
            }
        );
        assert_eq!(model.decode(&code).unwrap(), vec![11.0]);
    }

    #[test]
    fn entries_land_in_their_lists() {
        let (model, _, entries) = setup(200);
        let idx = PQIndex::build(model, entries.clone()).unwrap();
        assert_eq!(idx.len(), 200);
        let total: usize = (0..8).map(|c| idx.list_len(c)).sum();
        assert_eq!(total, 200);
        for c in 0..8 {
            let want = entries.iter().filter(|(e, _)| e.coarse_id == c as u32).count();
            assert_eq!(idx.list_len(c), want);
        }
    }

    #[test]
    fn full_probe_returns_everything_sorted() {
        let (model, keys, entries) = setup(60);
        let idx = PQIndex::build(model, entries).unwrap();
        let res = idx.search(&keys[..8], 1000, 8).unwrap();
        assert_eq!(res.len(), 60);
        for w in res.windows(2) {
            assert!((w[0].distance, w[0].seq) <= (w[1].distance, w[1].seq));
        }
    }

    #[test]
    fn stored_codeword_is_found_first() {
        let (model, _, entries) = setup(100);
        let target = entries[17].0.clone();
        let q = model.decode(&target).unwrap();
        let idx = PQIndex::build(model, entries).unwrap();
        let res = idx.search(&q, 3, 8).unwrap();
        assert!(res[0].distance < 1e-6);
        assert_eq!(res[0].code, target);
    }

    #[test]
    fn full_probe_equals_brute_force_over_reconstructions() {
        let (model, keys, entries) = setup(300);
        let recon: Vec<Vec<f32>> = entries.iter().map(|(c, _)| model.decode(c).unwrap()).collect();
        let idx = PQIndex::build(model, entries).unwrap();
        for q in keys.chunks(8).step_by(37) {
            let mut brute: Vec<(f64, usize)> = recon
                .iter()
                .enumerate()
                .map(|(i, r)| (q.iter().zip(r).map(|(a, b)| ((a - b) as f64).powi(2)).sum(), i))
                .collect();
            brute.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let got = idx.search(q, 10, 8).unwrap();
            let got_ids: Vec<usize> = got.iter().map(|n| n.seq as usize).collect();
            let want_ids: Vec<usize> = brute.iter().take(10).map(|b| b.1).collect();
            assert_eq!(got_ids, want_ids);
        }
    }

    #[test]
    fn empty_index_and_zero_k() {
        let (model, keys, _) = setup(20);
        let idx = PQIndex::build(model, Vec::new()).unwrap();
        assert!(matches!(idx.search(&keys[..8], 4, 2), Err(SearchError::EmptyIndex)));
        assert!(matches!(idx.search(&keys[..8], 0, 2), Err(SearchError::ZeroK)));
    }

    #[test]
    fn build_rejects_invalid_codes() {
        let (model, _, _) = setup(20);
        let bad = vec![(
            EncodedKey {
                coarse_id: 99,
                subcodes: vec![0; 4],
            },
            TokenId(0),
        )];
        assert!(PQIndex::build(model, bad).is_err());
    }

    #[test]
    fn encoded_store_roundtrip() {
        let (_, _, entries) = setup(50);
        let s = EncodedStore { m: 4, entries };
        let b = s.to_bytes();
        assert_eq!(b.len(), 16 + 50 * 16);
        assert_eq!(EncodedStore::from_bytes(&b).unwrap(), s);
        assert!(EncodedStore::from_bytes(&b[..b.len() - 1]).is_err());
    }
}
