//! The Meta-k gate: a one-hidden-layer ReLU network producing a distribution
//! over candidate retrieval sizes, and the ensemble it drives.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::knn::{knn_distribution, meta_features, InferenceError, MetaKConfig, RetrievalSet};
use crate::memstore::{ByteReader, TokenId};

pub const METAK_MAGIC: [u8; 4] = *b"FNMK";
pub const METAK_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct MetaKNetwork {
    n_in: usize,
    hidden: usize,
    n_out: usize,
    /// Row-major `n_in × hidden`.
    w1: Vec<f64>,
    b1: Vec<f64>,
    /// Row-major `hidden × n_out`.
    w2: Vec<f64>,
    b2: Vec<f64>,
}

fn softmax(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

struct Activations {
    pre: Vec<f64>,
    hidden: Vec<f64>,
    out: Vec<f64>,
}

impl MetaKNetwork {
    /// All-zero network; its output is uniform over the candidates.
    pub fn zeros(cfg: &MetaKConfig) -> Self {
        let (n_in, hidden, n_out) = (cfg.n_features(), cfg.hidden, cfg.candidates().len());
        Self {
            n_in,
            hidden,
            n_out,
            w1: vec![0.0; n_in * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden * n_out],
            b2: vec![0.0; n_out],
        }
    }

    /// He-initialized hidden layer and a zero output layer, so the initial
    /// gate is uniform.
    pub fn init(cfg: &MetaKConfig, seed: u64) -> Self {
        let mut net = Self::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, (2.0 / net.n_in as f64).sqrt()).expect("positive std");
        for w in &mut net.w1 {
            *w = normal.sample(&mut rng);
        }
        net
    }

    pub fn n_inputs(&self) -> usize {
        self.n_in
    }

    pub fn n_outputs(&self) -> usize {
        self.n_out
    }

    pub fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn params(&self) -> Vec<f64> {
        [&self.w1[..], &self.b1, &self.w2, &self.b2].concat()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<(), InferenceError> {
        if params.len() != self.n_params() {
            return Err(InferenceError::Format(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                params.len()
            )));
        }
        let mut rest = params;
        for part in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            let (head, tail) = rest.split_at(part.len());
            part.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    fn check_features(&self, features: &[f64]) -> Result<(), InferenceError> {
        if features.len() != self.n_in {
            return Err(InferenceError::FeatureLength {
                expected: self.n_in,
                found: features.len(),
            });
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(InferenceError::NonFinite(i));
        }
        Ok(())
    }

    fn activations(&self, x: &[f64]) -> Activations {
        let mut pre = self.b1.clone();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &self.w1[i * self.hidden..(i + 1) * self.hidden];
            for (p, w) in pre.iter_mut().zip(row) {
                *p += xi * w;
            }
        }
        let hidden: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
        let mut out = self.b2.clone();
        for (h, &hv) in hidden.iter().enumerate() {
            if hv == 0.0 {
                continue;
            }
            let row = &self.w2[h * self.n_out..(h + 1) * self.n_out];
            for (o, w) in out.iter_mut().zip(row) {
                *o += hv * w;
            }
        }
        softmax(&mut out);
        Activations { pre, hidden, out }
    }

    /// `p_Meta` over the candidate sizes.
    pub fn forward(&self, features: &[f64]) -> Result<Vec<f64>, InferenceError> {
        self.check_features(features)?;
        Ok(self.activations(features).out)
    }

    /// Accumulates `scale · ∂L/∂θ` for `L = -ln Σ_j p_Meta(j)·q_j` into `grad`.
    /// Returns the loss, or `None` when every component gives the gold token
    /// zero probability.
    fn accumulate(&self, ex: &MetaKExample, scale: f64, grad: &mut [f64]) -> Option<f64> {
        let act = self.activations(&ex.features);
        let p: f64 = act.out.iter().zip(&ex.gold_probs).map(|(a, q)| a * q).sum();
        if p <= 0.0 {
            return None;
        }
        let dz: Vec<f64> = act
            .out
            .iter()
            .zip(&ex.gold_probs)
            .map(|(a, q)| a * (1.0 - q / p))
            .collect();

        let (gw1, rest) = grad.split_at_mut(self.w1.len());
        let (gb1, rest) = rest.split_at_mut(self.b1.len());
        let (gw2, gb2) = rest.split_at_mut(self.w2.len());
        for (g, d) in gb2.iter_mut().zip(&dz) {
            *g += scale * d;
        }
        let mut dpre = vec![0.0; self.hidden];
        for h in 0..self.hidden {
            let row = &self.w2[h * self.n_out..(h + 1) * self.n_out];
            let grow = &mut gw2[h * self.n_out..(h + 1) * self.n_out];
            let mut back = 0.0;
            for o in 0..self.n_out {
                grow[o] += scale * act.hidden[h] * dz[o];
                back += row[o] * dz[o];
            }
            if act.pre[h] > 0.0 {
                dpre[h] = back;
            }
        }
        for (g, d) in gb1.iter_mut().zip(&dpre) {
            *g += scale * d;
        }
        for (i, &xi) in ex.features.iter().enumerate() {
            let grow = &mut gw1[i * self.hidden..(i + 1) * self.hidden];
            for (g, d) in grow.iter_mut().zip(&dpre) {
                *g += scale * xi * d;
            }
        }
        Some(-p.ln())
    }

    /// Mean loss and its analytic gradient over `examples`, skipping those
    /// with no probability on the gold token. Also returns the number used.
    pub fn loss_and_grad(&self, examples: &[MetaKExample]) -> (f64, Vec<f64>, usize) {
        let mut grad = vec![0.0; self.n_params()];
        let usable: Vec<&MetaKExample> = examples.iter().filter(|e| e.usable()).collect();
        if usable.is_empty() {
            return (0.0, grad, 0);
        }
        let scale = 1.0 / usable.len() as f64;
        let mut loss = 0.0;
        for ex in &usable {
            loss += self.accumulate(ex, scale, &mut grad).expect("usable example") * scale;
        }
        (loss, grad, usable.len())
    }

    /// Mean loss over usable examples.
    pub fn loss(&self, examples: &[MetaKExample]) -> f64 {
        let usable: Vec<&MetaKExample> = examples.iter().filter(|e| e.usable()).collect();
        if usable.is_empty() {
            return 0.0;
        }
        let total: f64 = usable
            .iter()
            .map(|ex| {
                let a = self.activations(&ex.features).out;
                -a.iter().zip(&ex.gold_probs).map(|(a, q)| a * q).sum::<f64>().ln()
            })
            .sum();
        total / usable.len() as f64
    }

    pub fn serialized_len(&self) -> usize {
        20 + 4 * self.n_params()
    }

    /// `"FNMK" | version | n_in | hidden | n_out` then `w1, b1, w2, b2` as
    /// little-endian f32, matrices row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.serialized_len());
        out.extend_from_slice(&METAK_MAGIC);
        for v in [METAK_VERSION, self.n_in as u32, self.hidden as u32, self.n_out as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.params() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, InferenceError> {
        let fmt = |e: crate::memstore::MemstoreError| InferenceError::Format(e.to_string());
        let mut r = ByteReader::new(bytes);
        if r.array::<4>().map_err(fmt)? != METAK_MAGIC {
            return Err(InferenceError::Format("bad magic".into()));
        }
        let version = r.u32().map_err(fmt)?;
        if version != METAK_VERSION {
            return Err(InferenceError::Format(format!("unsupported version {version}")));
        }
        let n_in = r.u32().map_err(fmt)? as usize;
        let hidden = r.u32().map_err(fmt)? as usize;
        let n_out = r.u32().map_err(fmt)? as usize;
        let mut net = Self {
            n_in,
            hidden,
            n_out,
            w1: vec![0.0; n_in * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden * n_out],
            b2: vec![0.0; n_out],
        };
        if r.remaining() != 4 * net.n_params() {
            return Err(InferenceError::Format(format!(
                "expected {} parameter bytes, found {}",
                4 * net.n_params(),
                r.remaining()
            )));
        }
        let mut params = Vec::with_capacity(net.n_params());
        for _ in 0..net.n_params() {
            let v = r.f32().map_err(fmt)?;
            if !v.is_finite() {
                return Err(InferenceError::Format("non-finite parameter".into()));
            }
            params.push(v as f64);
        }
        net.set_params(&params)?;
        Ok(net)
    }
}

/// Distribution for each candidate size: the base distribution for `k = 0`,
/// the top-`k` neighbour distribution otherwise.
pub fn component_distributions(
    base_dist: &[f64],
    retrieval: &RetrievalSet,
    cfg: &MetaKConfig,
) -> Result<Vec<Vec<f64>>, InferenceError> {
    cfg.candidates()
        .into_iter()
        .map(|k| {
            if k == 0 {
                Ok(base_dist.to_vec())
            } else {
                knn_distribution(retrieval.top(k), cfg.temperature, cfg.kernel, base_dist.len())
            }
        })
        .collect()
}

/// `Σ_j w_j · p_{k_j}` for explicit gate weights. An empty retrieval set
/// returns the base distribution unchanged.
pub fn mix_with_weights(
    base_dist: &[f64],
    retrieval: &RetrievalSet,
    weights: &[f64],
    cfg: &MetaKConfig,
) -> Result<Vec<f64>, InferenceError> {
    if retrieval.is_empty() {
        return Ok(base_dist.to_vec());
    }
    let comps = component_distributions(base_dist, retrieval, cfg)?;
    if weights.len() != comps.len() {
        return Err(InferenceError::FeatureLength {
            expected: comps.len(),
            found: weights.len(),
        });
    }
    let mut out = vec![0.0; base_dist.len()];
    for (w, comp) in weights.iter().zip(comps) {
        if *w == 0.0 {
            continue;
        }
        for (o, p) in out.iter_mut().zip(comp) {
            *o += w * p;
        }
    }
    Ok(out)
}

/// Gate output for `retrieval`, or `None` when retrieval is empty.
pub fn meta_k_forward(
    net: &MetaKNetwork,
    retrieval: &RetrievalSet,
    cfg: &MetaKConfig,
) -> Result<Option<Vec<f64>>, InferenceError> {
    if retrieval.is_empty() {
        return Ok(None);
    }
    net.forward(&meta_features(retrieval, cfg)).map(Some)
}

/// Final next-token distribution mixing the base model with kNN retrieval.
pub fn ensemble_predict(
    base_dist: &[f64],
    retrieval: &RetrievalSet,
    net: &MetaKNetwork,
    cfg: &MetaKConfig,
) -> Result<Vec<f64>, InferenceError> {
    match meta_k_forward(net, retrieval, cfg)? {
        None => Ok(base_dist.to_vec()),
        Some(w) => mix_with_weights(base_dist, retrieval, &w, cfg),
    }
}

/// One gate training example: features plus the gold-token probability under
/// each candidate component.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaKExample {
    pub features: Vec<f64>,
    pub gold_probs: Vec<f64>,
}

impl MetaKExample {
    /// `None` for an empty retrieval set, where the gate has no effect.
    pub fn new(
        base_dist: &[f64],
        retrieval: &RetrievalSet,
        gold: TokenId,
        cfg: &MetaKConfig,
    ) -> Result<Option<Self>, InferenceError> {
        if retrieval.is_empty() {
            return Ok(None);
        }
        if gold.index() >= base_dist.len() {
            return Err(InferenceError::TokenOutOfRange {
                token: gold.0,
                vocab_size: base_dist.len(),
            });
        }
        let gold_probs = component_distributions(base_dist, retrieval, cfg)?
            .into_iter()
            .map(|d| d[gold.index()])
            .collect();
        Ok(Some(Self {
            features: meta_features(retrieval, cfg),
            gold_probs,
        }))
    }

    fn usable(&self) -> bool {
        self.gold_probs.iter().any(|&q| q > 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaKTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MetaKTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.05,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Mini-batch gradient descent on the mean ensemble NLL. Returns the full
/// training loss before the first epoch and after each epoch.
pub fn train_meta_k(
    net: &mut MetaKNetwork,
    examples: &[MetaKExample],
    hyper: &MetaKTrainConfig,
) -> Result<Vec<f64>, InferenceError> {
    if examples.is_empty() {
        return Err(InferenceError::Config("no training examples".into()));
    }
    if hyper.batch_size == 0 || !(hyper.lr.is_finite() && hyper.lr >= 0.0) {
        return Err(InferenceError::Config("batch size and learning rate".into()));
    }
    if let Some(ex) = examples
        .iter()
        .find(|e| e.features.len() != net.n_in || e.gold_probs.len() != net.n_out)
    {
        return Err(InferenceError::FeatureLength {
            expected: net.n_in,
            found: ex.features.len(),
        });
    }
    let skipped = examples.iter().filter(|e| !e.usable()).count();
    if skipped > 0 {
        log::warn!("skipping {skipped} gate examples with zero gold probability in every component");
    }
    let usable: Vec<MetaKExample> = examples.iter().filter(|e| e.usable()).cloned().collect();
    let mut history = vec![net.loss(&usable)];
    if usable.is_empty() {
        return Ok(history);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut params = net.params();
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<MetaKExample> = chunk.iter().map(|&i| usable[i].clone()).collect();
            let (_, grad, _) = net.loss_and_grad(&batch);
            for (p, g) in params.iter_mut().zip(grad) {
                *p -= hyper.lr * g;
            }
            net.set_params(&params)?;
        }
        history.push(net.loss(&usable));
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: u32) -> TokenId {
        TokenId(v)
    }

    fn cfg(k: usize) -> MetaKConfig {
        MetaKConfig {
            k_max: k,
            hidden: 6,
            ..MetaKConfig::default()
        }
    }

    fn random_net(c: &MetaKConfig, seed: u64) -> MetaKNetwork {
        let mut net = MetaKNetwork::zeros(c);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.7).unwrap();
        let p: Vec<f64> = (0..net.n_params()).map(|_| normal.sample(&mut rng)).collect();
        net.set_params(&p).unwrap();
        net
    }

    #[test]
    fn zero_network_is_uniform() {
        for k in [1usize, 2, 8] {
            let c = cfg(k);
            let net = MetaKNetwork::zeros(&c);
            let p = net.forward(&vec![0.3; c.n_features()]).unwrap();
            let s = c.candidates().len();
            assert_eq!(p.len(), s);
            for v in p {
                assert!((v - 1.0 / s as f64).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn forward_rejects_bad_features() {
        let c = cfg(2);
        let net = MetaKNetwork::zeros(&c);
        assert!(matches!(
            net.forward(&[0.0; 3]),
            Err(InferenceError::FeatureLength { .. })
        ));
        assert_eq!(
            net.forward(&[0.0, f64::NAN, 0.0, 0.0]),
            Err(InferenceError::NonFinite(1))
        );
    }

    #[test]
    fn ensemble_examples() {
        let c = cfg(1);
        let base = vec![0.1, 0.2, 0.3, 0.4];
        let near = RetrievalSet::new(vec![(0.0, t(2))]).unwrap();
        assert_eq!(mix_with_weights(&base, &near, &[1.0, 0.0], &c).unwrap(), base);
        assert_eq!(
            mix_with_weights(&base, &near, &[0.0, 1.0], &c).unwrap(),
            vec![0.0, 0.0, 1.0, 0.0]
        );
        let uniform = vec![0.25; 4];
        let p = mix_with_weights(&uniform, &near, &[0.5, 0.5], &c).unwrap();
        let want = [0.125, 0.125, 0.625, 0.125];
        for (a, b) in p.iter().zip(want) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_retrieval_returns_base_exactly() {
        let c = cfg(4);
        let base = vec![0.7, 0.2, 0.1];
        let net = random_net(&c, 3);
        assert_eq!(ensemble_predict(&base, &RetrievalSet::empty(), &net, &c).unwrap(), base);
        assert!(meta_k_forward(&net, &RetrievalSet::empty(), &c).unwrap().is_none());
    }

    #[test]
    fn equal_neighbors_permutation_invariant() {
        let c = cfg(4);
        let net = random_net(&c, 5);
        let base = vec![0.25; 4];
        let a = RetrievalSet::new(vec![(0.5, t(1)), (0.5, t(1)), (0.9, t(3))]).unwrap();
        let mut swapped = a.neighbors().to_vec();
        swapped.swap(0, 1);
        let b = RetrievalSet::new(swapped).unwrap();
        assert_eq!(
            ensemble_predict(&base, &a, &net, &c).unwrap(),
            ensemble_predict(&base, &b, &net, &c).unwrap()
        );
    }

    #[test]
    fn serialization_roundtrip() {
        let c = cfg(4);
        let net = random_net(&c, 9);
        let bytes = net.to_bytes();
        assert_eq!(&bytes[..4], b"FNMK");
        assert_eq!(bytes.len(), net.serialized_len());
        let back = MetaKNetwork::from_bytes(&bytes).unwrap();
        for (a, b) in net.params().iter().zip(back.params()) {
            assert_eq!(*a as f32 as f64, b);
        }
        assert!(MetaKNetwork::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(MetaKNetwork::from_bytes(&bad).is_err());
    }

    fn random_example(c: &MetaKConfig, rng: &mut ChaCha8Rng, vocab: u32) -> MetaKExample {
        use rand::Rng;
        let n = rng.gen_range(1..=c.k_max + 2);
        let mut ds: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..3.0)).collect();
        ds.sort_by(f64::total_cmp);
        let r = RetrievalSet::new(ds.into_iter().map(|d| (d, t(rng.gen_range(0..vocab)))).collect()).unwrap();
        let mut base: Vec<f64> = (0..vocab).map(|_| rng.gen_range(0.01..1.0)).collect();
        let z: f64 = base.iter().sum();
        base.iter_mut().for_each(|b| *b /= z);
        let gold = t(rng.gen_range(0..vocab));
        MetaKExample::new(&base, &r, gold, c).unwrap().unwrap()
    }

    /// Relative error `‖a − b‖ / max(‖a‖, ‖b‖)` between the analytic gradient
    /// and central differences with step 1e-4.
    fn gradient_check(net: &MetaKNetwork, batch: &[MetaKExample]) -> f64 {
        let (_, analytic, _) = net.loss_and_grad(batch);
        let base = net.params();
        let h = 1e-4;
        let mut probe = net.clone();
        let numeric: Vec<f64> = (0..base.len())
            .map(|i| {
                let mut p = base.clone();
                p[i] += h;
                probe.set_params(&p).unwrap();
                let up = probe.loss(batch);
                p[i] -= 2.0 * h;
                probe.set_params(&p).unwrap();
                let down = probe.loss(batch);
                (up - down) / (2.0 * h)
            })
            .collect();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        norm(&diff) / norm(&analytic).max(norm(&numeric)).max(1e-12)
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        for seed in 0..24u64 {
            let c = cfg([1usize, 2, 4, 8][seed as usize % 4]);
            let net = random_net(&c, 100 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batch: Vec<MetaKExample> = (0..4).map(|_| random_example(&c, &mut rng, 6)).collect();
            let rel = gradient_check(&net, &batch);
            assert!(rel < 1e-4, "seed {seed}: relative error {rel}");
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let c = cfg(2);
        let mut net = random_net(&c, 1);
        let before = net.params();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ex: Vec<_> = (0..10).map(|_| random_example(&c, &mut rng, 5)).collect();
        let hyper = MetaKTrainConfig {
            lr: 0.0,
            epochs: 3,
            ..MetaKTrainConfig::default()
        };
        train_meta_k(&mut net, &ex, &hyper).unwrap();
        assert_eq!(net.params(), before);
    }

    #[test]
    fn training_moves_mass_to_retrieval_when_neighbor_is_gold() {
        let c = cfg(2);
        let mut net = MetaKNetwork::init(&c, 4);
        let base = vec![0.25; 4];
        let r = RetrievalSet::new(vec![(0.0, t(3)), (1.0, t(1))]).unwrap();
        let ex = MetaKExample::new(&base, &r, t(3), &c).unwrap().unwrap();
        let feats = meta_features(&r, &c);
        let before: f64 = net.forward(&feats).unwrap()[1..].iter().sum();
        let hyper = MetaKTrainConfig {
            epochs: 20,
            lr: 0.1,
            batch_size: 1,
            seed: 0,
        };
        let hist = train_meta_k(&mut net, &[ex], &hyper).unwrap();
        let after: f64 = net.forward(&feats).unwrap()[1..].iter().sum();
        assert!(after > before, "{before} -> {after}");
        assert!(hist.last().unwrap() < &hist[0]);
    }

    #[test]
    fn full_batch_loss_does_not_increase() {
        let c = cfg(4);
        let mut net = MetaKNetwork::init(&c, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ex: Vec<_> = (0..40).map(|_| random_example(&c, &mut rng, 6)).collect();
        let hyper = MetaKTrainConfig {
            epochs: 25,
            lr: 0.01,
            batch_size: ex.len(),
            seed: 0,
        };
        let hist = train_meta_k(&mut net, &ex, &hyper).unwrap();
        for w in hist.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{hist:?}");
        }
    }

    #[test]
    fn examples_without_gold_mass_are_skipped() {
        let c = cfg(1);
        let ex = MetaKExample {
            features: vec![0.0, 1.0],
            gold_probs: vec![0.0, 0.0],
        };
        let net = MetaKNetwork::init(&c, 0);
        let (loss, grad, used) = net.loss_and_grad(std::slice::from_ref(&ex));
        assert_eq!((loss, used), (0.0, 0));
        assert!(grad.iter().all(|&g| g == 0.0));
        assert!(train_meta_k(&mut net.clone(), &[], &MetaKTrainConfig::default()).is_err());
    }

    proptest! {
        #[test]
        fn ensemble_is_a_distribution(seed in 0u64..10_000, k_pow in 0u32..4) {
            let c = cfg(1 << k_pow);
            let net = random_net(&c, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            use rand::Rng;
            let n = rng.gen_range(1..12);
            let mut ds: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..4.0)).collect();
            ds.sort_by(f64::total_cmp);
            let r = RetrievalSet::new(ds.into_iter().map(|d| (d, t(rng.gen_range(0..9)))).collect()).unwrap();
            let mut base: Vec<f64> = (0..9).map(|_| rng.gen_range(0.0..1.0)).collect();
            let z: f64 = base.iter().sum();
            base.iter_mut().for_each(|b| *b /= z);
            let gate = meta_k_forward(&net, &r, &c).unwrap().unwrap();
            prop_assert!((gate.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let p = ensemble_predict(&base, &r, &net, &c).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
        }
    }
}
