use fednn_core::baselines::{make_domain_corpus, write_trace, SequenceModel, ToyModel, TraceModel};
use fednn_core::inference::{MetaKConfig, MetaKNetwork};
use fednn_core::memstore::{build_datastore, Datastore};
use fednn_core::quantizer::{train_pq, EncodedStore, PQConfig, PQIndex, PQModel};

fn cfg() -> PQConfig {
    PQConfig {
        n_coarse: 8,
        m: 4,
        bits: 4,
        n_probe: 8,
        kmeans_iters: 8,
        seed: 1,
    }
}

#[test]
fn datastore_quantizer_and_codes_survive_disk() {
    let corpus = make_domain_corpus(0, 40, 3, 32, 3..=7);
    let mut model = ToyModel::new(32, 16, 1);
    model.train_steps(&corpus, 10, 1.0).unwrap();
    let store = build_datastore(&model, &corpus).unwrap();
    let store2 = Datastore::from_bytes(&store.to_bytes()).unwrap();
    assert_eq!(store2.keys_flat(), store.keys_flat());
    assert_eq!(store2.values(), store.values());

    let pq = train_pq(store.keys_flat(), store.dim(), &cfg()).unwrap();
    let pq2 = PQModel::from_bytes(&pq.to_bytes()).unwrap();
    let enc = EncodedStore::encode(&pq, &store).unwrap();
    let enc2 = EncodedStore::from_bytes(&enc.to_bytes()).unwrap();
    assert_eq!(enc2.entries, enc.entries);
    assert_eq!(EncodedStore::encode(&pq2, &store2).unwrap().entries, enc.entries);

    let a = PQIndex::build(pq, enc.entries.clone()).unwrap();
    let b = PQIndex::build(pq2, enc2.entries).unwrap();
    for q in store.keys_flat().chunks(16).step_by(11) {
        assert_eq!(a.search(q, 5, 4).unwrap(), b.search(q, 5, 4).unwrap());
    }
}

#[test]
fn trace_replay_builds_the_same_store() {
    let corpus = make_domain_corpus(1, 15, 4, 32, 2..=6);
    let model = ToyModel::new(32, 16, 2);
    let bytes = write_trace(&model, &corpus).unwrap();
    let replay = TraceModel::from_bytes(&bytes, &corpus).unwrap();
    let a = build_datastore(&model, &corpus).unwrap();
    let b = build_datastore(&replay, &corpus).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
}

#[test]
fn gate_weights_survive_disk() {
    let c = MetaKConfig::default();
    let net = MetaKNetwork::init(&c, 3);
    let back = MetaKNetwork::from_bytes(&net.to_bytes()).unwrap();
    assert_eq!(back.to_bytes(), net.to_bytes());
    let feats: Vec<f64> = (0..c.n_features()).map(|i| i as f64 * 0.1).collect();
    let (p, q) = (net.forward(&feats).unwrap(), back.forward(&feats).unwrap());
    for (x, y) in p.iter().zip(&q) {
        assert!((x - y).abs() < 1e-6);
    }
}
