//! End-to-end experiment runner producing a deterministic JSON report.

use fednn_core::baselines::{
    corpus_nll, fedavg_run, ft_ensemble_predict, ft_ensemble_run, make_domain_corpus, partition, EnsembleMode,
    FedAvgConfig, PartitionSpec, SequenceModel, ToyModel,
};
use fednn_core::federation::{closed_form_comm, ledger_report, run_fednn_round, LedgerReport, RoundSeeds};
use fednn_core::inference::{teacher_forced_accuracy, train_meta_k, KnnDecoder, MetaKExample, MetaKNetwork};
use fednn_core::memstore::{build_datastore, ParallelCorpus};
use fednn_core::quantizer::{train_pq, PQIndex, PQModel};
use fednn_core::sealing::{SealingScheme, X25519Envelope};
use serde::Serialize;
use std::collections::BTreeMap;
use thiserror::Error;

use crate::config::{EnsembleWeighting, ExpMethod, ExperimentConfig};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error("partition: {0}")]
    Partition(#[from] fednn_core::baselines::PartitionError),
    #[error("protocol: {0}")]
    Protocol(#[from] fednn_core::federation::ProtocolError),
    #[error("model: {0}")]
    Model(#[from] fednn_core::baselines::ModelError),
    #[error("datastore: {0}")]
    Memstore(#[from] fednn_core::memstore::MemstoreError),
    #[error("quantizer: {0}")]
    Quantizer(#[from] fednn_core::quantizer::QuantizerError),
    #[error("fedavg: {0}")]
    FedAvg(#[from] fednn_core::baselines::FedAvgError),
    #[error("ensemble: {0}")]
    Ensemble(#[from] fednn_core::baselines::EnsembleError),
    #[error("inference: {0}")]
    Inference(#[from] fednn_core::inference::InferenceError),
    #[error("decode: {0}")]
    Decode(#[from] fednn_core::inference::DecodeError),
}

/// Train/dev/test splits of every client domain plus the public data.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub domain_train: Vec<ParallelCorpus>,
    pub domain_dev: Vec<ParallelCorpus>,
    pub domain_test: Vec<ParallelCorpus>,
    pub public_train: ParallelCorpus,
    pub public_test: ParallelCorpus,
    pub client_train: Vec<ParallelCorpus>,
    pub client_test: Vec<ParallelCorpus>,
    /// Gate training data, drawn from the first client's share of the dev
    /// splits.
    pub gate_dev: ParallelCorpus,
}

fn slice(c: &ParallelCorpus, from: usize, to: usize) -> ParallelCorpus {
    let mut out = ParallelCorpus::new(c.domain.clone(), c.vocab_size);
    out.pairs = c.pairs[from..to].to_vec();
    out
}

fn union(parts: &[ParallelCorpus], name: &str, vocab: usize) -> ParallelCorpus {
    let mut out = ParallelCorpus::new(name, vocab);
    for p in parts {
        out.pairs.extend(p.pairs.iter().cloned());
    }
    out
}

pub fn generate_data(cfg: &ExperimentConfig) -> Result<ExperimentData, ExperimentError> {
    let per_domain = cfg.train_pairs + cfg.dev_pairs + cfg.test_pairs;
    let lens = cfg.len_min..=cfg.len_max;
    let domains: Vec<ParallelCorpus> = (0..cfg.n_domains)
        .map(|d| make_domain_corpus(d as u32, per_domain, cfg.data_seed, cfg.vocab, lens.clone()))
        .collect();
    let split_at = |c: &ParallelCorpus| {
        (
            slice(c, 0, cfg.train_pairs),
            slice(c, cfg.train_pairs, cfg.train_pairs + cfg.dev_pairs),
            slice(c, cfg.train_pairs + cfg.dev_pairs, per_domain),
        )
    };
    let mut domain_train = Vec::new();
    let mut domain_dev = Vec::new();
    let mut domain_test = Vec::new();
    for d in &domains {
        let (a, b, c) = split_at(d);
        domain_train.push(a);
        domain_dev.push(b);
        domain_test.push(c);
    }
    let public = make_domain_corpus(
        cfg.n_domains as u32,
        cfg.public_pairs + cfg.test_pairs,
        cfg.data_seed,
        cfg.vocab,
        lens,
    );
    let mut public_train = slice(&public, 0, cfg.public_pairs);
    public_train.domain = "public".into();
    let mut public_test = slice(&public, cfg.public_pairs, public.len());
    public_test.domain = "public".into();

    let spec = PartitionSpec {
        mode: cfg.scenario,
        n_clients: cfg.n_clients,
        alpha: cfg.alpha,
        beta: cfg.beta,
        seed: cfg.data_seed,
    };
    let eval_spec = PartitionSpec {
        beta: None,
        ..spec.clone()
    };
    let client_train = partition(&domain_train, &spec)?.clients;
    let client_test = partition(&domain_test, &eval_spec)?.clients;
    let gate_dev = partition(&domain_dev, &eval_spec)?.clients.swap_remove(0);
    Ok(ExperimentData {
        domain_train,
        domain_dev,
        domain_test,
        public_train,
        public_test,
        client_train,
        client_test,
        gate_dev,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataSummary {
    pub client_train_pairs: Vec<usize>,
    pub client_test_pairs: Vec<usize>,
    pub public_train_pairs: usize,
    pub public_test_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodReport {
    pub method: &'static str,
    /// Teacher-forced token accuracy (%) on each client's test split.
    pub client_accuracy: Vec<f64>,
    pub mean_client_accuracy: f64,
    /// Accuracy (%) on the public test split.
    pub server_accuracy: f64,
    /// `[client][domain]` accuracy (%) on every domain test split.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub domain_accuracy: Option<Vec<Vec<f64>>>,
    /// Mean token NLL of the final model on the pooled client training data.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_train_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub client_store_records: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub global_store_records: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cost: Option<LedgerReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub report_version: u32,
    pub content_hash: String,
    pub config: BTreeMap<&'static str, String>,
    pub data: DataSummary,
    pub methods: Vec<MethodReport>,
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn method(&self, m: ExpMethod) -> Option<&MethodReport> {
        self.methods.iter().find(|r| r.method == m.as_str())
    }
}

/// Applies `cost.m_mb` / `cost.d_mb` overrides to a measured ledger report.
fn with_cost_constants(mut rep: LedgerReport, cfg: &ExperimentConfig) -> LedgerReport {
    if cfg.cost_m_mb.is_none() && cfg.cost_d_mb.is_none() {
        return rep;
    }
    if let Some(m) = cfg.cost_m_mb {
        rep.m_mb = m;
    }
    if let Some(d) = cfg.cost_d_mb {
        rep.d_mb = d;
    }
    rep.closed_form_gb = rep
        .method
        .and_then(|m| closed_form_comm(m, rep.m_mb, rep.n, rep.r.max(1), rep.d_mb).ok());
    rep
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn model_accuracy<M: SequenceModel>(model: &M, corpus: &ParallelCorpus) -> Result<f64, ExperimentError> {
    Ok(teacher_forced_accuracy(corpus, |s, p| model.next_token_dist(s, p))?.percent())
}

fn plain_report<M: SequenceModel>(
    method: ExpMethod,
    model: &M,
    data: &ExperimentData,
) -> Result<MethodReport, ExperimentError> {
    let client_accuracy = data
        .client_test
        .iter()
        .map(|c| model_accuracy(model, c))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MethodReport {
        method: method.as_str(),
        mean_client_accuracy: mean(&client_accuracy),
        client_accuracy,
        server_accuracy: model_accuracy(model, &data.public_test)?,
        domain_accuracy: None,
        final_train_loss: None,
        client_store_records: None,
        global_store_records: None,
        cost: None,
    })
}

/// Public model trained on the public split only.
pub fn train_public_model(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<ToyModel, ExperimentError> {
    let mut model = ToyModel::new(cfg.vocab, cfg.dim, cfg.model_seed);
    model.train_steps(&data.public_train, cfg.public_steps, cfg.public_lr)?;
    Ok(model)
}

/// Key-encryption model trained by the server on its public datastore.
pub fn train_server_pq(
    cfg: &ExperimentConfig,
    model: &ToyModel,
    data: &ExperimentData,
) -> Result<PQModel, ExperimentError> {
    let store = build_datastore(model, &data.public_train)?;
    Ok(train_pq(store.keys_flat(), store.dim(), &cfg.pq)?)
}

/// Trains the gate on `dev` against `index` and returns it.
pub fn train_gate<M: SequenceModel>(
    cfg: &ExperimentConfig,
    model: &M,
    index: &PQIndex,
    dev: &ParallelCorpus,
) -> Result<MetaKNetwork, ExperimentError> {
    let mut net = MetaKNetwork::init(&cfg.metak, cfg.metak_seed);
    let probe = KnnDecoder {
        model,
        index: Some(index),
        net: &net,
        cfg: &cfg.metak,
        n_probe: cfg.pq.n_probe,
    };
    let per_pair = fednn_core::par::try_map(&dev.pairs, |p| {
        let mut out = Vec::new();
        for t in 0..p.tgt.len() {
            let base = model.next_token_dist(&p.src, &p.tgt[..t])?;
            let retrieval = probe.retrieve(&p.src, &p.tgt[..t])?;
            if let Some(ex) = MetaKExample::new(&base, &retrieval, p.tgt[t], &cfg.metak)? {
                out.push(ex);
            }
        }
        Ok::<_, ExperimentError>(out)
    })?;
    let examples: Vec<MetaKExample> = per_pair.into_iter().flatten().collect();
    if !examples.is_empty() {
        train_meta_k(&mut net, &examples, &cfg.metak_train)?;
    }
    Ok(net)
}

fn run_fednn(cfg: &ExperimentConfig, model: &ToyModel, data: &ExperimentData) -> Result<MethodReport, ExperimentError> {
    let pq = train_server_pq(cfg, model, data)?;
    let scheme = X25519Envelope;
    let keys = scheme.keygen(cfg.seal_seed);
    let outcome = run_fednn_round(
        model,
        &pq,
        &data.client_train,
        &keys,
        &scheme,
        RoundSeeds {
            shuffle: cfg.shuffle_seed,
            seal: cfg.seal_seed,
        },
    )?;
    let indexes = outcome
        .global_stores
        .iter()
        .map(|s| PQIndex::build(pq.clone(), s.entries.iter().cloned()))
        .collect::<Result<Vec<_>, _>>()?;
    let net = train_gate(cfg, model, &indexes[0], &data.gate_dev)?;
    let decoders: Vec<KnnDecoder<'_, ToyModel>> = indexes
        .iter()
        .map(|index| KnnDecoder {
            model,
            index: Some(index),
            net: &net,
            cfg: &cfg.metak,
            n_probe: cfg.pq.n_probe,
        })
        .collect();
    let acc = |dec: &KnnDecoder<'_, ToyModel>, corpus: &ParallelCorpus| -> Result<f64, ExperimentError> {
        Ok(teacher_forced_accuracy(corpus, |s, p| dec.step(s, p).map(|x| x.dist))?.percent())
    };
    let client_accuracy = decoders
        .iter()
        .zip(&data.client_test)
        .map(|(d, c)| acc(d, c))
        .collect::<Result<Vec<_>, _>>()?;
    let domain_accuracy = decoders
        .iter()
        .map(|d| {
            data.domain_test
                .iter()
                .map(|c| acc(d, c))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MethodReport {
        method: ExpMethod::FedNN.as_str(),
        mean_client_accuracy: mean(&client_accuracy),
        client_accuracy,
        server_accuracy: acc(&decoders[0], &data.public_test)?,
        domain_accuracy: Some(domain_accuracy),
        final_train_loss: None,
        client_store_records: Some(outcome.local_stores.iter().map(|s| s.len()).collect()),
        global_store_records: Some(outcome.global_sealed.count()),
        cost: Some(with_cost_constants(ledger_report(&outcome.ledger), cfg)),
    })
}

fn run_fedavg(
    cfg: &ExperimentConfig,
    model: &ToyModel,
    data: &ExperimentData,
) -> Result<MethodReport, ExperimentError> {
    let fcfg = FedAvgConfig {
        rounds: cfg.fedavg.rounds,
        freq: cfg.fedavg.freq,
        include_server_data: cfg.fedavg.server_data,
        local_steps: cfg.fedavg.local_steps,
        lr: cfg.fedavg.lr,
    };
    let out = fedavg_run(model, Some(&data.public_train), &data.client_train, &fcfg)?;
    let mut rep = plain_report(ExpMethod::FedAvg, &out.model, data)?;
    let pooled = union(&data.client_train, "pooled", cfg.vocab);
    rep.final_train_loss = Some(corpus_nll(&out.model, &pooled)?);
    rep.cost = Some(with_cost_constants(ledger_report(&out.ledger), cfg));
    Ok(rep)
}

fn run_ft_ensemble(
    cfg: &ExperimentConfig,
    model: &ToyModel,
    data: &ExperimentData,
) -> Result<MethodReport, ExperimentError> {
    let out = ft_ensemble_run(model, &data.client_train, cfg.ft_steps, cfg.ft_lr)?;
    let mode = match cfg.ft_mode {
        EnsembleWeighting::Mean => EnsembleMode::Mean,
        EnsembleWeighting::Weighted => {
            let counts: Vec<usize> = data.client_train.iter().map(|c| c.target_tokens()).collect();
            if counts.iter().sum::<usize>() == 0 {
                EnsembleMode::Mean
            } else {
                EnsembleMode::Weighted(counts)
            }
        }
    };
    let acc = |corpus: &ParallelCorpus| -> Result<f64, ExperimentError> {
        Ok(teacher_forced_accuracy(corpus, |s, p| ft_ensemble_predict(&out.models, s, p, &mode))?.percent())
    };
    let client_accuracy = data.client_test.iter().map(acc).collect::<Result<Vec<_>, _>>()?;
    Ok(MethodReport {
        method: ExpMethod::FtEnsemble.as_str(),
        mean_client_accuracy: mean(&client_accuracy),
        client_accuracy,
        server_accuracy: acc(&data.public_test)?,
        domain_accuracy: None,
        final_train_loss: None,
        client_store_records: None,
        global_store_records: None,
        cost: Some(with_cost_constants(ledger_report(&out.ledger), cfg)),
    })
}

fn run_centralized(
    cfg: &ExperimentConfig,
    model: &ToyModel,
    data: &ExperimentData,
) -> Result<MethodReport, ExperimentError> {
    let pooled = union(&data.client_train, "pooled", cfg.vocab);
    let mut central = model.clone();
    central.train_steps(&pooled, cfg.central_steps, cfg.central_lr)?;
    let mut rep = plain_report(ExpMethod::Centralized, &central, data)?;
    rep.final_train_loss = Some(corpus_nll(&central, &pooled)?);
    Ok(rep)
}

/// Runs every requested method in order. Identical configs give
/// byte-identical reports.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report, ExperimentError> {
    let data = generate_data(cfg)?;
    let model = train_public_model(cfg, &data)?;
    let mut methods = Vec::with_capacity(cfg.methods.len());
    for &m in &cfg.methods {
        log::info!("running {}", m.as_str());
        methods.push(match m {
            ExpMethod::Public => plain_report(ExpMethod::Public, &model, &data)?,
            ExpMethod::FedNN => run_fednn(cfg, &model, &data)?,
            ExpMethod::FedAvg => run_fedavg(cfg, &model, &data)?,
            ExpMethod::FtEnsemble => run_ft_ensemble(cfg, &model, &data)?,
            ExpMethod::Centralized => run_centralized(cfg, &model, &data)?,
        });
    }
    Ok(Report {
        report_version: REPORT_VERSION,
        content_hash: cfg.content_hash(),
        config: cfg.resolved(),
        data: DataSummary {
            client_train_pairs: data.client_train.iter().map(|c| c.len()).collect(),
            client_test_pairs: data.client_test.iter().map(|c| c.len()).collect(),
            public_train_pairs: data.public_train.len(),
            public_test_pairs: data.public_test.len(),
        },
        methods,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig::from_pairs([
            ("train_pairs", "60"),
            ("dev_pairs", "20"),
            ("test_pairs", "20"),
            ("public_pairs", "60"),
            ("public_steps", "10"),
            ("pq.n_coarse", "4"),
            ("pq.n_probe", "2"),
            ("pq.iters", "5"),
            ("metak.epochs", "2"),
            ("fedavg.rounds", "2"),
            ("ft.steps", "2"),
            ("central.steps", "2"),
        ])
        .unwrap()
    }

    #[test]
    fn public_only_has_one_section() {
        let mut c = small();
        c.methods = vec![ExpMethod::Public];
        let r = run_experiment(&c).unwrap();
        assert_eq!(r.methods.len(), 1);
        assert_eq!(r.methods[0].method, "public");
        assert_eq!(r.report_version, 1);
        assert_eq!(r.methods[0].client_accuracy.len(), 3);
    }

    #[test]
    fn all_methods_and_determinism() {
        let mut c = small();
        c.methods = vec![
            ExpMethod::Public,
            ExpMethod::FedNN,
            ExpMethod::FedAvg,
            ExpMethod::FtEnsemble,
            ExpMethod::Centralized,
        ];
        let a = run_experiment(&c).unwrap();
        let b = run_experiment(&c).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let fednn = a.method(ExpMethod::FedNN).unwrap();
        let records: usize = fednn.client_store_records.as_ref().unwrap().iter().sum();
        assert_eq!(fednn.global_store_records, Some(records));
        assert_eq!(fednn.domain_accuracy.as_ref().unwrap().len(), 3);
        assert!(a.method(ExpMethod::FedAvg).unwrap().final_train_loss.is_some());
        let v: serde_json::Value = serde_json::from_str(&a.to_json()).unwrap();
        assert_eq!(v["report_version"], 1);
        assert_eq!(v["config"]["scenario"], "non_iid");
    }

    #[test]
    fn paper_constants_override_closed_form() {
        let mut c = small();
        c.methods = vec![ExpMethod::FedNN];
        c.cost_m_mb = Some(414.0);
        c.cost_d_mb = Some(1978.0);
        let r = run_experiment(&c).unwrap();
        let cost = r.methods[0].cost.as_ref().unwrap();
        assert_eq!(cost.closed_form_gb, Some(5.08));
        assert_eq!(cost.n, 3);
    }
}
