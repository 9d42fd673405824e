//! The one-round memorization exchange.
//!
//! 1. The server broadcasts the base model and the key-encryption model.
//! 2. Each client builds its datastore, encodes the keys, seals every
//!    `(code, token)` record under the shared content key and uploads them.
//! 3. The server concatenates all uploads, shuffles the records and unicasts
//!    the resulting global store to every client.
//! 4. Each client opens the records to obtain the global encoded store.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::ledger::{CostLedger, Method};
use super::network::{client_node, Message, MessageKind, SimNetwork, SERVER};
use crate::baselines::{ModelError, SequenceModel};
use crate::memstore::{build_datastore, MemstoreError, ParallelCorpus};
use crate::par;
use crate::quantizer::{EncodedStore, PQModel, QuantizerError};
use crate::sealing::{record_rng, split_stream, KeyPair, SealError, SealedRecord, SealingScheme};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("client {client}: failed to open global record {index}: {source}")]
    Decrypt {
        client: usize,
        index: usize,
        source: SealError,
    },
    #[error("client {client}: sealing failed: {source}")]
    Seal { client: usize, source: SealError },
    #[error("malformed upload from client {client}: {source}")]
    Upload { client: usize, source: SealError },
    #[error("malformed record payload: {0}")]
    Record(MemstoreError),
    #[error("expected {expected:?} for node {node}, found {found:?}")]
    Unexpected {
        node: u16,
        expected: MessageKind,
        found: Option<MessageKind>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Datastore(#[from] MemstoreError),
    #[error(transparent)]
    Quantizer(#[from] QuantizerError),
}

/// Global memory as relayed by the server: shuffled sealed records.
///
/// Serialized as `count u32` followed by the self-delimiting records.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GlobalSealedStore {
    pub records: Vec<SealedRecord>,
}

impl GlobalSealedStore {
    pub fn count(&self) -> usize {
        self.records.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let len = 4 + self.records.iter().map(|r| r.wire_len()).sum::<usize>();
        let mut out = Vec::with_capacity(len);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            r.write_to(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SealError> {
        if bytes.len() < 4 {
            return Err(SealError::Format("missing record count".into()));
        }
        let count = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
        let records = split_stream(&bytes[4..])?;
        if records.len() != count {
            return Err(SealError::Format(format!(
                "header says {count} records, found {}",
                records.len()
            )));
        }
        Ok(Self { records })
    }
}

/// Server-side V-encryption: a seeded uniform permutation of the records.
pub fn shuffle_v_encrypt<T>(mut records: Vec<T>, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    records.shuffle(&mut rng);
    records
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundSeeds {
    /// Seed for the server's shuffle.
    pub shuffle: u64,
    /// Base seed for per-record sealing randomness.
    pub seal: u64,
}

/// Everything a FedNN round produces.
#[derive(Debug)]
pub struct RoundOutcome {
    /// Decrypted global store as seen by each client, in client order.
    pub global_stores: Vec<EncodedStore>,
    /// Each client's encoded store before sealing.
    pub local_stores: Vec<EncodedStore>,
    pub global_sealed: GlobalSealedStore,
    pub ledger: CostLedger,
    /// Every frame that crossed the simulated wire.
    pub wire_log: Vec<Vec<u8>>,
}

fn expect(net: &mut SimNetwork, node: u16, kind: MessageKind) -> Result<Message, ProtocolError> {
    match net.recv(node) {
        Some(m) if m.kind == kind => Ok(m),
        other => Err(ProtocolError::Unexpected {
            node,
            expected: kind,
            found: other.map(|m| m.kind),
        }),
    }
}

/// Runs the full memorization-based round over a simulated network.
///
/// `model` is the server's trained base model; clients receive its
/// parameters over the wire and rebuild a local copy.
pub fn run_fednn_round<M, S>(
    model: &M,
    pq: &PQModel,
    clients: &[ParallelCorpus],
    keys: &KeyPair,
    scheme: &S,
    seeds: RoundSeeds,
) -> Result<RoundOutcome, ProtocolError>
where
    M: SequenceModel + Clone,
    S: SealingScheme + ?Sized,
{
    let n = clients.len();
    let mut net = SimNetwork::with_wire_log();
    let model_payload: Vec<u8> = model.parameters().iter().flat_map(|v| v.to_le_bytes()).collect();
    let pq_payload = pq.to_bytes();

    for c in 0..n {
        net.send(Message {
            kind: MessageKind::BroadcastModel,
            sender: SERVER,
            receiver: client_node(c),
            payload: model_payload.clone(),
        });
        net.send(Message {
            kind: MessageKind::BroadcastKE,
            sender: SERVER,
            receiver: client_node(c),
            payload: pq_payload.clone(),
        });
    }

    // Private memorization construction.
    let mut local_stores = Vec::with_capacity(n);
    for (c, corpus) in clients.iter().enumerate() {
        let node = client_node(c);
        let params_msg = expect(&mut net, node, MessageKind::BroadcastModel)?;
        let ke_msg = expect(&mut net, node, MessageKind::BroadcastKE)?;
        let params: Vec<f32> = params_msg
            .payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let mut local_model = model.clone();
        local_model.set_parameters(&params)?;
        let local_pq = PQModel::from_bytes(&ke_msg.payload)?;

        let store = build_datastore(&local_model, corpus)?;
        let encoded = EncodedStore::encode(&local_pq, &store)?;
        let sealed = par::map_range(encoded.len(), |i| {
            let (code, value) = &encoded.entries[i];
            let mut rng = record_rng(seeds.seal, c as u64, i as u64);
            scheme.seal(&keys.public_key, &EncodedStore::record_bytes(code, *value), &mut rng)
        });
        let mut payload = Vec::new();
        for rec in sealed {
            rec.map_err(|source| ProtocolError::Seal { client: c, source })?
                .write_to(&mut payload);
        }
        net.send(Message {
            kind: MessageKind::UploadSealedStore,
            sender: node,
            receiver: SERVER,
            payload,
        });
        local_stores.push(encoded);
    }

    // Global memorization aggregation.
    let mut pooled = Vec::new();
    let mut store_bytes = 0u64;
    for c in 0..n {
        let msg = expect(&mut net, SERVER, MessageKind::UploadSealedStore)?;
        if msg.sender != client_node(c) {
            return Err(ProtocolError::Unexpected {
                node: SERVER,
                expected: MessageKind::UploadSealedStore,
                found: Some(msg.kind),
            });
        }
        store_bytes += msg.payload.len() as u64;
        pooled.extend(split_stream(&msg.payload).map_err(|source| ProtocolError::Upload { client: c, source })?);
    }
    let global_sealed = GlobalSealedStore {
        records: shuffle_v_encrypt(pooled, seeds.shuffle),
    };
    let global_payload = global_sealed.to_bytes();
    for c in 0..n {
        net.send(Message {
            kind: MessageKind::BroadcastGlobalStore,
            sender: SERVER,
            receiver: client_node(c),
            payload: global_payload.clone(),
        });
    }

    let m = pq.m();
    let mut global_stores = Vec::with_capacity(n);
    for c in 0..n {
        let msg = expect(&mut net, client_node(c), MessageKind::BroadcastGlobalStore)?;
        let received = GlobalSealedStore::from_bytes(&msg.payload)
            .map_err(|source| ProtocolError::Upload { client: c, source })?;
        let opened = par::map(&received.records, |r| scheme.open(&keys.private_key, r));
        let mut store = EncodedStore::new(m);
        for (index, plain) in opened.into_iter().enumerate() {
            let plain = plain.map_err(|source| ProtocolError::Decrypt {
                client: c,
                index,
                source,
            })?;
            store
                .entries
                .push(EncodedStore::parse_record(&plain, m).map_err(ProtocolError::Record)?);
        }
        global_stores.push(store);
    }

    let wire_log = net.wire_log().to_vec();
    let mut ledger = net.into_ledger();
    ledger.method = Some(Method::FedNN);
    ledger.model_bytes = (model_payload.len() + pq_payload.len()) as u64;
    ledger.store_bytes = store_bytes;
    ledger.n_clients = n;
    ledger.rounds = 1;

    Ok(RoundOutcome {
        global_stores,
        local_stores,
        global_sealed,
        ledger,
        wire_log,
    })
}

/// Bytes a FedNN round puts on the wire for the given sizes: model and
/// key-encryption broadcast to each client, one upload per client, and the
/// global store unicast to each client.
pub fn fednn_wire_bytes(model_bytes: u64, client_store_bytes: &[u64]) -> u64 {
    let n = client_store_bytes.len() as u64;
    let total: u64 = client_store_bytes.iter().sum();
    model_bytes * n + total + (total + 4) * n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shuffle_basics() {
        assert!(shuffle_v_encrypt(Vec::<u32>::new(), 1).is_empty());
        let xs: Vec<u32> = (0..100).collect();
        let a = shuffle_v_encrypt(xs.clone(), 5);
        assert_eq!(a, shuffle_v_encrypt(xs.clone(), 5));
        assert_ne!(a, xs);
        let mut s = a.clone();
        s.sort_unstable();
        assert_eq!(s, xs);
    }

    #[test]
    fn global_store_serialization() {
        let g = GlobalSealedStore::default();
        assert_eq!(g.to_bytes(), vec![0, 0, 0, 0]);
        assert_eq!(GlobalSealedStore::from_bytes(&g.to_bytes()).unwrap(), g);
        assert!(GlobalSealedStore::from_bytes(&[1, 0, 0, 0]).is_err());
    }

    #[test]
    fn wire_bytes_affine_in_n_for_fixed_total() {
        let m = 1000u64;
        let d = 6000u64;
        let measured: Vec<u64> = [1usize, 2, 3, 6]
            .iter()
            .map(|&n| fednn_wire_bytes(m, &vec![d / n as u64; n]))
            .collect();
        // measured(N) = (M + D + 4)·N + D
        for (&n, &got) in [1u64, 2, 3, 6].iter().zip(&measured) {
            assert_eq!(got, (m + d + 4) * n + d);
        }
    }
}
