//! Multi-round parameter averaging with a configurable aggregation
//! frequency.

use thiserror::Error;

use super::model::{ModelError, SequenceModel};
use crate::federation::{client_node, CostLedger, Message, MessageKind, Method, SimNetwork, SERVER};
use crate::memstore::ParallelCorpus;
use crate::par;

#[derive(Debug, Error)]
pub enum FedAvgError {
    #[error("parameter vector {index} has length {found}, expected {expected}")]
    LengthMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("total sample count is zero")]
    ZeroCount,
    #[error("no parameter vectors to aggregate")]
    Empty,
    #[error("{0} vectors but {1} counts")]
    CountMismatch(usize, usize),
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// `Σ (n_m / n)·θ_m` with `n = Σ n_m`, accumulated in f64.
pub fn fedavg_aggregate<P: AsRef<[f32]>>(params: &[P], counts: &[usize]) -> Result<Vec<f32>, FedAvgError> {
    if params.is_empty() {
        return Err(FedAvgError::Empty);
    }
    if params.len() != counts.len() {
        return Err(FedAvgError::CountMismatch(params.len(), counts.len()));
    }
    let len = params[0].as_ref().len();
    for (index, p) in params.iter().enumerate() {
        if p.as_ref().len() != len {
            return Err(FedAvgError::LengthMismatch {
                index,
                expected: len,
                found: p.as_ref().len(),
            });
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(FedAvgError::ZeroCount);
    }
    let mut acc = vec![0.0f64; len];
    for (p, &n) in params.iter().zip(counts) {
        let w = n as f64 / total as f64;
        for (a, &v) in acc.iter_mut().zip(p.as_ref()) {
            *a += w * v as f64;
        }
    }
    Ok(acc.into_iter().map(|v| v as f32).collect())
}

/// How many local update rounds run between two aggregations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregationFreq {
    Every(usize),
    /// Train locally for all rounds, then aggregate once.
    Once,
}

impl AggregationFreq {
    /// Number of communication rounds for `rounds` local update rounds.
    pub fn exchanges(self, rounds: usize) -> usize {
        match self {
            AggregationFreq::Every(k) => rounds.div_ceil(k),
            AggregationFreq::Once => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedAvgConfig {
    /// Total local update rounds `R`.
    pub rounds: usize,
    pub freq: AggregationFreq,
    /// Server trains on its own data and joins each aggregation.
    pub include_server_data: bool,
    /// Gradient steps per local update round.
    pub local_steps: usize,
    pub lr: f64,
}

impl FedAvgConfig {
    fn validate(&self) -> Result<(), FedAvgError> {
        if self.rounds == 0 {
            return Err(FedAvgError::Schedule("rounds must be at least 1".into()));
        }
        if self.freq == AggregationFreq::Every(0) {
            return Err(FedAvgError::Schedule("aggregation frequency must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(FedAvgError::Schedule(format!("learning rate {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct FedAvgOutcome<M> {
    pub model: M,
    pub ledger: CostLedger,
    pub exchanges: usize,
}

fn encode_params(params: &[f32]) -> Vec<u8> {
    params.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn decode_params(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect()
}

/// Runs FedAvg over a simulated network.
///
/// Each exchange sends the global parameters to every client, lets clients
/// run up to `k` local rounds, and collects their parameters back. Updates
/// are weighted by target-token count.
pub fn fedavg_run<M>(
    server: &M,
    server_data: Option<&ParallelCorpus>,
    clients: &[ParallelCorpus],
    cfg: &FedAvgConfig,
) -> Result<FedAvgOutcome<M>, FedAvgError>
where
    M: SequenceModel + Clone,
{
    cfg.validate()?;
    let mut net = SimNetwork::new();
    let mut global = server.clone();
    let exchanges = cfg.freq.exchanges(cfg.rounds);
    let mut done = 0usize;
    let server_corpus = server_data.filter(|_| cfg.include_server_data);

    for exchange in 0..exchanges {
        let local_rounds = match cfg.freq {
            AggregationFreq::Every(k) => k.min(cfg.rounds - done),
            AggregationFreq::Once => cfg.rounds,
        };
        done += local_rounds;
        let kind = if exchange == 0 {
            MessageKind::BroadcastModel
        } else {
            MessageKind::ModelAggregate
        };
        let payload = encode_params(&global.parameters());
        for c in 0..clients.len() {
            net.send(Message {
                kind,
                sender: SERVER,
                receiver: client_node(c),
                payload: payload.clone(),
            });
        }

        let received: Vec<Vec<f32>> = (0..clients.len())
            .map(|c| decode_params(&net.recv(client_node(c)).expect("download was queued").payload))
            .collect();
        let steps = local_rounds * cfg.local_steps;
        let trained = par::try_map_range(clients.len(), |c| {
            let mut local = global.clone();
            local.set_parameters(&received[c])?;
            local.train_steps(&clients[c], steps, cfg.lr)?;
            Ok::<_, ModelError>(local.parameters())
        })?;
        for (c, params) in trained.iter().enumerate() {
            net.send(Message {
                kind: MessageKind::ModelUpdate,
                sender: client_node(c),
                receiver: SERVER,
                payload: encode_params(params),
            });
        }

        let mut params = Vec::with_capacity(clients.len() + 1);
        let mut counts = Vec::with_capacity(clients.len() + 1);
        for client in clients {
            params.push(decode_params(&net.recv(SERVER).expect("upload was queued").payload));
            counts.push(client.target_tokens());
        }
        if let Some(data) = server_corpus {
            let mut local = global.clone();
            local.train_steps(data, steps, cfg.lr)?;
            params.push(local.parameters());
            counts.push(data.target_tokens());
        }
        if counts.iter().sum::<usize>() > 0 {
            global.set_parameters(&fedavg_aggregate(&params, &counts)?)?;
        }
    }

    let mut ledger = net.into_ledger();
    ledger.method = Some(Method::FedAvg);
    ledger.model_bytes = global.parameter_bytes() as u64;
    ledger.n_clients = clients.len();
    ledger.rounds = exchanges;
    Ok(FedAvgOutcome {
        model: global,
        ledger,
        exchanges,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::{make_domain_corpus, ToyModel};
    use proptest::prelude::*;

    #[test]
    fn aggregate_examples() {
        let v = vec![1.5f32, -2.0, 3.25];
        assert_eq!(fedavg_aggregate(&[v.clone(), v.clone()], &[7, 2]).unwrap(), v);
        assert_eq!(
            fedavg_aggregate(&[vec![0.0f32], vec![4.0]], &[1, 3]).unwrap(),
            vec![3.0]
        );
    }

    #[test]
    fn aggregate_errors() {
        assert!(matches!(
            fedavg_aggregate(&[vec![0.0f32], vec![1.0, 2.0]], &[1, 1]),
            Err(FedAvgError::LengthMismatch { index: 1, .. })
        ));
        assert!(matches!(
            fedavg_aggregate(&[vec![1.0f32]], &[0]),
            Err(FedAvgError::ZeroCount)
        ));
        assert!(matches!(
            fedavg_aggregate::<Vec<f32>>(&[], &[]),
            Err(FedAvgError::Empty)
        ));
        assert!(matches!(
            fedavg_aggregate(&[vec![1.0f32]], &[1, 2]),
            Err(FedAvgError::CountMismatch(1, 2))
        ));
    }

    proptest! {
        #[test]
        fn weights_sum_to_one(counts in prop::collection::vec(1usize..1000, 1..8)) {
            let ones: Vec<Vec<f32>> = counts.iter().map(|_| vec![1.0]).collect();
            let out = fedavg_aggregate(&ones, &counts).unwrap();
            prop_assert!((out[0] - 1.0).abs() < 1e-6);
        }

        #[test]
        fn scale_consistent(
            vals in prop::collection::vec(-10.0f32..10.0, 1..6),
            scale in 1usize..50,
        ) {
            let params: Vec<Vec<f32>> = vals.iter().map(|&v| vec![v]).collect();
            let counts: Vec<usize> = (1..=vals.len()).collect();
            let scaled: Vec<usize> = counts.iter().map(|c| c * scale).collect();
            let a = fedavg_aggregate(&params, &counts).unwrap();
            let b = fedavg_aggregate(&params, &scaled).unwrap();
            prop_assert!((a[0] - b[0]).abs() <= 1e-5 * (1.0 + a[0].abs()));
        }
    }

    fn clients(n: usize) -> Vec<ParallelCorpus> {
        (0..n).map(|d| make_domain_corpus(d as u32, 20, 9, 32, 3..=6)).collect()
    }

    #[test]
    fn zero_local_steps_leaves_model_unchanged() {
        let server = ToyModel::new(32, 8, 1);
        let cfg = FedAvgConfig {
            rounds: 1,
            freq: AggregationFreq::Every(1),
            include_server_data: false,
            local_steps: 0,
            lr: 0.5,
        };
        let out = fedavg_run(&server, None, &clients(1), &cfg).unwrap();
        assert_eq!(out.model.parameters(), server.parameters());
    }

    #[test]
    fn ledger_counts_two_transfers_per_client_per_exchange() {
        let server = ToyModel::new(32, 8, 1);
        let m = server.parameter_bytes() as u64;
        let cs = clients(3);
        for (freq, rounds, exchanges) in [
            (AggregationFreq::Every(1), 4usize, 4u64),
            (AggregationFreq::Every(3), 4, 2),
            (AggregationFreq::Once, 4, 1),
        ] {
            let cfg = FedAvgConfig {
                rounds,
                freq,
                include_server_data: true,
                local_steps: 1,
                lr: 0.2,
            };
            let out = fedavg_run(&server, Some(&cs[0]), &cs, &cfg).unwrap();
            assert_eq!(out.exchanges as u64, exchanges);
            assert_eq!(out.ledger.total_bytes(), m * 3 * exchanges * 2);
            assert_eq!(out.ledger.messages(MessageKind::ModelUpdate), 3 * exchanges);
        }
    }

    #[test]
    fn single_exchange_per_round_equals_pooled_descent() {
        // With one full-batch step per round, token-weighted averaging equals
        // gradient descent on the pooled data.
        let server = ToyModel::new(32, 8, 3);
        let cs = clients(3);
        let cfg = FedAvgConfig {
            rounds: 3,
            freq: AggregationFreq::Every(1),
            include_server_data: false,
            local_steps: 1,
            lr: 0.3,
        };
        let fed = fedavg_run(&server, None, &cs, &cfg).unwrap().model;
        let mut pooled = ParallelCorpus::new("all", 32);
        for c in &cs {
            pooled.pairs.extend(c.pairs.iter().cloned());
        }
        let mut central = server.clone();
        for _ in 0..3 {
            central.train_steps(&pooled, 1, 0.3).unwrap();
            central.set_parameters(&central.parameters()).unwrap();
        }
        for (a, b) in fed.parameters().iter().zip(central.parameters()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn bad_schedule_rejected() {
        let server = ToyModel::new(32, 8, 1);
        let mut cfg = FedAvgConfig {
            rounds: 0,
            freq: AggregationFreq::Once,
            include_server_data: false,
            local_steps: 1,
            lr: 0.1,
        };
        assert!(matches!(
            fedavg_run(&server, None, &clients(1), &cfg),
            Err(FedAvgError::Schedule(_))
        ));
        cfg.rounds = 2;
        cfg.freq = AggregationFreq::Every(0);
        assert!(matches!(
            fedavg_run(&server, None, &clients(1), &cfg),
            Err(FedAvgError::Schedule(_))
        ));
    }
}
