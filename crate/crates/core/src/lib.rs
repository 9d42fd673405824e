//! Federated nearest-neighbour translation memories.
//!
//! Clients turn private parallel corpora into `(context, next token)`
//! datastores, quantize and seal them, and a relay server merges everything
//! in a single exchange. Decoding mixes the base model with kNN retrieval over
//! the merged store through a small learned gate.

pub mod baselines;
pub mod federation;
pub mod inference;
pub mod memstore;
pub mod par;
pub mod privacy;
pub mod quantizer;
pub mod sealing;

pub use memstore::{build_datastore, Datastore, KeyVector, MemstoreError, ParallelCorpus, SentencePair, TokenId};
