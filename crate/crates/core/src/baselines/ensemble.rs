//! Per-client fine-tuning with output-distribution ensembling.

use thiserror::Error;

use super::model::{ModelError, SequenceModel};
use crate::federation::{client_node, CostLedger, Message, MessageKind, Method, SimNetwork, SERVER};
use crate::memstore::{ParallelCorpus, TokenId};
use crate::par;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("ensemble needs at least one model")]
    NoModels,
    #[error("model {index} has vocabulary {found}, expected {expected}")]
    VocabMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("{models} models but {weights} weights")]
    WeightCount { models: usize, weights: usize },
    #[error("ensemble weights sum to zero")]
    ZeroWeight,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EnsembleMode {
    Mean,
    /// Weight model `m` by `n_m / Σ n`.
    Weighted(Vec<usize>),
}

/// Combines the next-token distributions of `models`.
pub fn ft_ensemble_predict<M: SequenceModel>(
    models: &[M],
    src: &[TokenId],
    prefix: &[TokenId],
    mode: &EnsembleMode,
) -> Result<Vec<f64>, EnsembleError> {
    let first = models.first().ok_or(EnsembleError::NoModels)?;
    let vocab = first.vocab_size();
    for (index, m) in models.iter().enumerate() {
        if m.vocab_size() != vocab {
            return Err(EnsembleError::VocabMismatch {
                index,
                expected: vocab,
                found: m.vocab_size(),
            });
        }
    }
    let weights: Vec<f64> = match mode {
        EnsembleMode::Mean => vec![1.0 / models.len() as f64; models.len()],
        EnsembleMode::Weighted(counts) => {
            if counts.len() != models.len() {
                return Err(EnsembleError::WeightCount {
                    models: models.len(),
                    weights: counts.len(),
                });
            }
            let total: usize = counts.iter().sum();
            if total == 0 {
                return Err(EnsembleError::ZeroWeight);
            }
            counts.iter().map(|&c| c as f64 / total as f64).collect()
        }
    };
    let mut out = vec![0.0; vocab];
    for (m, w) in models.iter().zip(weights) {
        let dist = m.next_token_dist(src, prefix)?;
        for (o, p) in out.iter_mut().zip(dist) {
            *o += w * p;
        }
    }
    Ok(out)
}

#[derive(Debug)]
pub struct FtEnsembleOutcome<M> {
    pub models: Vec<M>,
    pub ledger: CostLedger,
}

/// Fine-tunes one copy of `public` per client and distributes every
/// fine-tuned model to every other client.
pub fn ft_ensemble_run<M>(
    public: &M,
    clients: &[ParallelCorpus],
    steps: usize,
    lr: f64,
) -> Result<FtEnsembleOutcome<M>, EnsembleError>
where
    M: SequenceModel + Clone,
{
    let mut net = SimNetwork::new();
    let payload: Vec<u8> = public.parameters().iter().flat_map(|v| v.to_le_bytes()).collect();
    for c in 0..clients.len() {
        net.send(Message {
            kind: MessageKind::BroadcastModel,
            sender: SERVER,
            receiver: client_node(c),
            payload: payload.clone(),
        });
    }
    let models = par::try_map_range(clients.len(), |c| {
        let mut local = public.clone();
        local.train_steps(&clients[c], steps, lr)?;
        Ok::<_, ModelError>(local)
    })?;
    let uploads: Vec<Vec<u8>> = models
        .iter()
        .map(|m| m.parameters().iter().flat_map(|v| v.to_le_bytes()).collect())
        .collect();
    for (c, up) in uploads.iter().enumerate() {
        net.send(Message {
            kind: MessageKind::ModelUpdate,
            sender: client_node(c),
            receiver: SERVER,
            payload: up.clone(),
        });
    }
    for c in 0..clients.len() {
        for (o, up) in uploads.iter().enumerate() {
            if o != c {
                net.send(Message {
                    kind: MessageKind::ModelAggregate,
                    sender: SERVER,
                    receiver: client_node(c),
                    payload: up.clone(),
                });
            }
        }
    }
    let mut ledger = net.into_ledger();
    ledger.method = Some(Method::FtEnsemble);
    ledger.model_bytes = public.parameter_bytes() as u64;
    ledger.n_clients = clients.len();
    ledger.rounds = 1;
    Ok(FtEnsembleOutcome { models, ledger })
}
