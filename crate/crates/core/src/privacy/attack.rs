//! Threat datasets and reconstruction attackers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::metrics::{privacy_prf, reconstruction_bleu, MetricError, PrivacyDictionary};
use crate::baselines::{ModelError, SequenceModel, SRC_TAG, TGT_TAG};
use crate::memstore::{ParallelCorpus, TokenId};
use crate::par;
use crate::quantizer::{EncodedKey, PQModel, QuantizerError};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("attacker holds no auxiliary records")]
    NoAuxiliaryData,
    #[error("record {0} carries an encoded key but the attacker has no quantizer")]
    MissingQuantizer(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Quantizer(#[from] QuantizerError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// A record key as the attacker sees it.
#[derive(Debug, Clone, PartialEq)]
pub enum ThreatKey {
    Raw(Vec<f32>),
    Encoded(EncodedKey),
}

/// A `(key, value)` record with the sequence it was derived from:
/// `<2src> source <2tgt> prefix value`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThreatSample {
    pub key: ThreatKey,
    pub value: TokenId,
    pub target: Vec<TokenId>,
}

/// One sample per target position (EOS included), keys encoded when `pq`
/// is given.
pub fn build_threat_dataset<M: SequenceModel + ?Sized>(
    corpus: &ParallelCorpus,
    model: &M,
    pq: Option<&PQModel>,
) -> Result<Vec<ThreatSample>, AttackError> {
    let per_pair = par::try_map(&corpus.pairs, |p| {
        let mut out = Vec::with_capacity(p.tgt.len());
        for t in 0..p.tgt.len() {
            let raw = model.context(&p.src, &p.tgt[..t])?;
            let key = match pq {
                Some(pq) => ThreatKey::Encoded(pq.encode(&raw)?),
                None => ThreatKey::Raw(raw),
            };
            let mut target = Vec::with_capacity(p.src.len() + t + 3);
            target.push(SRC_TAG);
            target.extend_from_slice(&p.src);
            target.push(TGT_TAG);
            target.extend_from_slice(&p.tgt[..t]);
            target.push(p.tgt[t]);
            out.push(ThreatSample {
                key,
                value: p.tgt[t],
                target,
            });
        }
        Ok::<_, AttackError>(out)
    })?;
    Ok(per_pair.into_iter().flatten().collect())
}

/// Reconstructs the sequence behind each attacked `(key, value)` record.
pub trait Attacker: Sync {
    fn name(&self) -> &str;

    /// One hypothesis per record, in order.
    fn reconstruct(&self, records: &[(ThreatKey, TokenId)]) -> Result<Vec<Vec<TokenId>>, AttackError>;
}

/// Nearest-neighbour lookup into the attacker's own raw-key records.
///
/// Encoded records are compared through their reconstruction, which gives
/// the same value as the asymmetric distance from the attacker's raw key.
pub struct NearestNeighborAttacker {
    keys: Vec<f32>,
    dim: usize,
    targets: Vec<Vec<TokenId>>,
    pq: Option<PQModel>,
}

impl NearestNeighborAttacker {
    /// `auxiliary` must carry raw keys; `pq` is needed to attack encoded
    /// records.
    pub fn new(auxiliary: &[ThreatSample], pq: Option<PQModel>) -> Result<Self, AttackError> {
        let mut keys = Vec::new();
        let mut targets = Vec::new();
        let mut dim = 0;
        for s in auxiliary {
            if let ThreatKey::Raw(k) = &s.key {
                dim = k.len();
                keys.extend_from_slice(k);
                targets.push(s.target.clone());
            }
        }
        if targets.is_empty() {
            return Err(AttackError::NoAuxiliaryData);
        }
        Ok(Self { keys, dim, targets, pq })
    }

    fn nearest(&self, query: &[f32]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, k) in self.keys.chunks_exact(self.dim).enumerate() {
            let d: f64 = k
                .iter()
                .zip(query)
                .map(|(a, b)| {
                    let x = *a as f64 - *b as f64;
                    x * x
                })
                .sum();
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }
}

impl Attacker for NearestNeighborAttacker {
    fn name(&self) -> &str {
        "nearest_neighbor"
    }

    fn reconstruct(&self, records: &[(ThreatKey, TokenId)]) -> Result<Vec<Vec<TokenId>>, AttackError> {
        let idx: Vec<usize> = (0..records.len()).collect();
        par::try_map(&idx, |&i| {
            let query = match &records[i].0 {
                ThreatKey::Raw(k) => k.clone(),
                ThreatKey::Encoded(code) => self.pq.as_ref().ok_or(AttackError::MissingQuantizer(i))?.decode(code)?,
            };
            let mut hyp = self.targets[self.nearest(&query)].clone();
            // The value travels in clear inside the record.
            if let Some(last) = hyp.last_mut() {
                *last = records[i].1;
            }
            Ok(hyp)
        })
    }
}

/// Convenience for attacking a threat dataset directly.
pub fn nn_baseline_attack(
    records: &[ThreatSample],
    auxiliary: &[ThreatSample],
    pq: Option<PQModel>,
) -> Result<Vec<Vec<TokenId>>, AttackError> {
    let attacker = NearestNeighborAttacker::new(auxiliary, pq)?;
    let inputs: Vec<(ThreatKey, TokenId)> = records.iter().map(|s| (s.key.clone(), s.value)).collect();
    attacker.reconstruct(&inputs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub attacker: String,
    pub defender: String,
    pub encrypted: bool,
    pub bleu: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub dict_size: usize,
    pub tau: f64,
}

/// Attacks `records` and scores the hypotheses against their true sequences.
pub fn evaluate_attack<A: Attacker + ?Sized>(
    attacker: &A,
    defender: &str,
    records: &[ThreatSample],
    dict: &PrivacyDictionary,
) -> Result<PrivacyReport, AttackError> {
    let inputs: Vec<(ThreatKey, TokenId)> = records.iter().map(|s| (s.key.clone(), s.value)).collect();
    let hyps = attacker.reconstruct(&inputs)?;
    let refs: Vec<Vec<TokenId>> = records.iter().map(|s| s.target.clone()).collect();
    let prf = privacy_prf(&hyps, &refs, dict)?;
    Ok(PrivacyReport {
        attacker: attacker.name().to_string(),
        defender: defender.to_string(),
        encrypted: records.iter().any(|s| matches!(s.key, ThreatKey::Encoded(_))),
        bleu: reconstruction_bleu(&hyps, &refs)?,
        precision: prf.precision,
        recall: prf.recall,
        f1: prf.f1,
        dict_size: dict.len(),
        tau: dict.tau,
    })
}
