//! Sequential vs rayon execution of the hot paths.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fednn_core::baselines::{make_domain_corpus, SequenceModel, ToyModel};
use fednn_core::memstore::build_datastore;
use fednn_core::par::{with_mode, Mode};
use fednn_core::quantizer::{train_pq, EncodedStore, PQConfig, PQIndex};
use fednn_core::sealing::{record_rng, SealingScheme, X25519Envelope};

const MODES: [(&str, Mode); 2] = [("sequential", Mode::Sequential), ("parallel", Mode::Parallel)];

fn setup() -> (ToyModel, fednn_core::memstore::ParallelCorpus) {
    let corpus = make_domain_corpus(0, 1000, 1, 64, 5..=12);
    let mut model = ToyModel::new(64, 32, 7);
    model.train_steps(&corpus, 5, 1.0).unwrap();
    (model, corpus)
}

fn benches(c: &mut Criterion) {
    let (model, corpus) = setup();
    let store = build_datastore(&model, &corpus).unwrap();
    let pq_cfg = PQConfig::desk();
    let pq = train_pq(store.keys_flat(), store.dim(), &pq_cfg).unwrap();
    let encoded = EncodedStore::encode(&pq, &store).unwrap();
    let index = PQIndex::build(pq.clone(), encoded.entries.iter().cloned()).unwrap();
    let queries: Vec<f32> = store.keys_flat()[..store.dim() * 500].to_vec();
    let scheme = X25519Envelope;
    let keys = scheme.keygen(1);
    let plaintexts: Vec<Vec<u8>> = encoded
        .entries
        .iter()
        .take(2000)
        .map(|(k, v)| EncodedStore::record_bytes(k, *v))
        .collect();

    let mut g = c.benchmark_group("build_datastore");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| with_mode(mode, || build_datastore(&model, &corpus).unwrap()))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("train_pq");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| with_mode(mode, || train_pq(store.keys_flat(), store.dim(), &pq_cfg).unwrap()))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("search_batch");
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| with_mode(mode, || index.search_batch(&queries, 8, pq_cfg.n_probe).unwrap()))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("seal_records");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                with_mode(mode, || {
                    fednn_core::par::map_range(plaintexts.len(), |i| {
                        let mut rng = record_rng(3, 0, i as u64);
                        scheme.seal(&keys.public_key, &plaintexts[i], &mut rng).unwrap()
                    })
                })
            })
        });
    }
    g.finish();
}

criterion_group!(parallel, benches);
criterion_main!(parallel);
