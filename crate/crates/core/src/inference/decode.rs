//! Autoregressive decoding with the retrieval-augmented ensemble, plus
//! teacher-forced accuracy.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::knn::{InferenceError, MetaKConfig, RetrievalSet};
use super::metak::{meta_k_forward, mix_with_weights, MetaKNetwork};
use crate::baselines::{ModelError, SequenceModel, EOS};
use crate::memstore::{ParallelCorpus, TokenId};
use crate::par;
use crate::quantizer::{PQIndex, SearchError};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error("beam width must be at least 1")]
    BeamWidth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

/// Base model plus optional retrieval over an encoded global store.
pub struct KnnDecoder<'a, M: ?Sized> {
    pub model: &'a M,
    pub index: Option<&'a PQIndex>,
    pub net: &'a MetaKNetwork,
    pub cfg: &'a MetaKConfig,
    pub n_probe: usize,
}

/// One decoding step: the final distribution and, when retrieval ran, the
/// gate weights over candidate sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub dist: Vec<f64>,
    pub gate: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    /// Generated tokens without the final EOS.
    pub tokens: Vec<TokenId>,
    /// `max_len` was reached before EOS.
    pub truncated: bool,
    /// Gate weights per step along the chosen hypothesis.
    pub gates: Vec<Option<Vec<f64>>>,
}

/// One line of decoder output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub source: Vec<u32>,
    pub hypothesis: Vec<u32>,
    pub truncated: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub chosen_k: Option<Vec<Option<Vec<f64>>>>,
}

impl DecodeRecord {
    pub fn new(source: &[TokenId], out: &Decoded, with_gates: bool) -> Self {
        Self {
            source: source.iter().map(|t| t.0).collect(),
            hypothesis: out.tokens.iter().map(|t| t.0).collect(),
            truncated: out.truncated,
            chosen_k: with_gates.then(|| out.gates.clone()),
        }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

impl<M: SequenceModel + ?Sized> KnnDecoder<'_, M> {
    /// Neighbours of the current context; empty when there is no index or it
    /// holds no records.
    pub fn retrieve(&self, src: &[TokenId], prefix: &[TokenId]) -> Result<RetrievalSet, DecodeError> {
        let Some(index) = self.index else {
            return Ok(RetrievalSet::empty());
        };
        let query = self.model.context(src, prefix)?;
        match index.search(&query, self.cfg.k_max, self.n_probe) {
            Ok(found) => Ok(RetrievalSet::from_search(&found)?),
            Err(SearchError::EmptyIndex) => Ok(RetrievalSet::empty()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn step(&self, src: &[TokenId], prefix: &[TokenId]) -> Result<Step, DecodeError> {
        let base = self.model.next_token_dist(src, prefix)?;
        let retrieval = self.retrieve(src, prefix)?;
        match meta_k_forward(self.net, &retrieval, self.cfg)? {
            None => Ok(Step { dist: base, gate: None }),
            Some(gate) => Ok(Step {
                dist: mix_with_weights(&base, &retrieval, &gate, self.cfg)?,
                gate: Some(gate),
            }),
        }
    }

    pub fn decode(&self, src: &[TokenId], max_len: usize, mode: DecodeMode) -> Result<Decoded, DecodeError> {
        match mode {
            DecodeMode::Greedy => self.greedy(src, max_len),
            DecodeMode::Beam(0) => Err(DecodeError::BeamWidth),
            DecodeMode::Beam(b) => self.beam(src, max_len, b),
        }
    }

    fn greedy(&self, src: &[TokenId], max_len: usize) -> Result<Decoded, DecodeError> {
        let mut tokens = Vec::new();
        let mut gates = Vec::new();
        while tokens.len() < max_len {
            let step = self.step(src, &tokens)?;
            let next = TokenId(argmax(&step.dist) as u32);
            gates.push(step.gate);
            if next == EOS {
                return Ok(Decoded {
                    tokens,
                    truncated: false,
                    gates,
                });
            }
            tokens.push(next);
        }
        Ok(Decoded {
            tokens,
            truncated: true,
            gates,
        })
    }

    fn beam(&self, src: &[TokenId], max_len: usize, width: usize) -> Result<Decoded, DecodeError> {
        struct Hyp {
            score: f64,
            tokens: Vec<TokenId>,
            gates: Vec<Option<Vec<f64>>>,
            done: bool,
        }
        let mut active = vec![Hyp {
            score: 0.0,
            tokens: Vec::new(),
            gates: Vec::new(),
            done: false,
        }];
        let mut finished: Vec<Hyp> = Vec::new();
        let mut steps = 0;
        while !active.is_empty() && steps < max_len {
            steps += 1;
            let outs = par::try_map(&active, |h| self.step(src, &h.tokens))?;
            // (score, beam, token) candidates, best first, ties to lower beam then token.
            let mut cand: Vec<(f64, usize, usize)> = Vec::new();
            for (b, (h, step)) in active.iter().zip(&outs).enumerate() {
                let mut order: Vec<usize> = (0..step.dist.len()).collect();
                order.sort_by(|&x, &y| step.dist[y].total_cmp(&step.dist[x]).then(x.cmp(&y)));
                for &tok in order.iter().take(width) {
                    cand.push((h.score + step.dist[tok].ln(), b, tok));
                }
            }
            cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut next = Vec::with_capacity(width);
            for (score, b, tok) in cand.into_iter().take(width) {
                let mut gates = active[b].gates.clone();
                gates.push(outs[b].gate.clone());
                let mut tokens = active[b].tokens.clone();
                let done = TokenId(tok as u32) == EOS;
                if !done {
                    tokens.push(TokenId(tok as u32));
                }
                let h = Hyp {
                    score,
                    tokens,
                    gates,
                    done,
                };
                if done {
                    finished.push(h);
                } else {
                    next.push(h);
                }
            }
            active = next;
        }
        let best = finished
            .into_iter()
            .chain(active)
            .reduce(|a, b| if b.score > a.score { b } else { a })
            .expect("beam always holds a hypothesis");
        Ok(Decoded {
            truncated: !best.done,
            tokens: best.tokens,
            gates: best.gates,
        })
    }
}

/// Convenience wrapper around [`KnnDecoder::decode`].
#[allow(clippy::too_many_arguments)]
pub fn decode<M: SequenceModel + ?Sized>(
    model: &M,
    index: Option<&PQIndex>,
    net: &MetaKNetwork,
    cfg: &MetaKConfig,
    n_probe: usize,
    source: &[TokenId],
    max_len: usize,
    mode: DecodeMode,
) -> Result<Decoded, DecodeError> {
    KnnDecoder {
        model,
        index,
        net,
        cfg,
        n_probe,
    }
    .decode(source, max_len, mode)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
}

impl Accuracy {
    /// Percentage in `[0, 100]`; zero for an empty corpus.
    pub fn percent(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.correct as f64 / self.total as f64
        }
    }
}

/// Fraction of target positions (EOS included) whose argmax under `predict`,
/// given the gold prefix, is the gold token.
pub fn teacher_forced_accuracy<F, E>(corpus: &ParallelCorpus, predict: F) -> Result<Accuracy, E>
where
    F: Fn(&[TokenId], &[TokenId]) -> Result<Vec<f64>, E> + Sync + Send,
    E: Send,
{
    let per_pair = par::try_map(&corpus.pairs, |p| {
        let mut correct = 0;
        for t in 0..p.tgt.len() {
            let dist = predict(&p.src, &p.tgt[..t])?;
            correct += usize::from(argmax(&dist) == p.tgt[t].index());
        }
        Ok((correct, p.tgt.len()))
    })?;
    Ok(per_pair.into_iter().fold(Accuracy::default(), |a, (c, n)| Accuracy {
        correct: a.correct + c,
        total: a.total + n,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::{make_domain_corpus, ToyModel};
    use crate::memstore::build_datastore;
    use crate::quantizer::{train_pq, EncodedStore, PQConfig};

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[1.0]), 0);
    }

    fn setup() -> (ToyModel, ParallelCorpus) {
        let corpus = make_domain_corpus(0, 60, 3, 32, 3..=6);
        let mut model = ToyModel::new(32, 16, 5);
        model.train_steps(&corpus, 30, 0.5).unwrap();
        (model, corpus)
    }

    fn index_for(model: &ToyModel, corpus: &ParallelCorpus) -> PQIndex {
        let store = build_datastore(model, corpus).unwrap();
        let cfg = PQConfig {
            n_coarse: 4,
            m: 4,
            bits: 4,
            n_probe: 4,
            kmeans_iters: 10,
            seed: 1,
        };
        let pq = train_pq(store.keys_flat(), store.dim(), &cfg).unwrap();
        let enc = EncodedStore::encode(&pq, &store).unwrap();
        PQIndex::build(pq, enc.entries).unwrap()
    }

    #[test]
    fn empty_index_equals_base_greedy() {
        let (model, corpus) = setup();
        let cfg = MetaKConfig::default();
        let net = MetaKNetwork::init(&cfg, 1);
        let empty = PQIndex::build(index_for(&model, &corpus).model().clone(), Vec::new()).unwrap();
        for p in corpus.pairs.iter().take(10) {
            let with = decode(&model, Some(&empty), &net, &cfg, 4, &p.src, 12, DecodeMode::Greedy).unwrap();
            let without = decode(&model, None, &net, &cfg, 4, &p.src, 12, DecodeMode::Greedy).unwrap();
            assert_eq!(with, without);
            // Reference greedy loop over the base model alone.
            let mut toks = Vec::new();
            loop {
                if toks.len() == 12 {
                    break;
                }
                let t = TokenId(argmax(&model.next_token_dist(&p.src, &toks).unwrap()) as u32);
                if t == EOS {
                    break;
                }
                toks.push(t);
            }
            assert_eq!(with.tokens, toks);
            assert!(with.gates.iter().all(Option::is_none));
        }
    }

    #[test]
    fn beam_one_equals_greedy() {
        let (model, corpus) = setup();
        let index = index_for(&model, &corpus);
        let cfg = MetaKConfig::default();
        let net = MetaKNetwork::init(&cfg, 2);
        for p in corpus.pairs.iter().take(10) {
            let g = decode(&model, Some(&index), &net, &cfg, 2, &p.src, 10, DecodeMode::Greedy).unwrap();
            let b = decode(&model, Some(&index), &net, &cfg, 2, &p.src, 10, DecodeMode::Beam(1)).unwrap();
            assert_eq!(g, b);
        }
        assert!(matches!(
            decode(
                &model,
                None,
                &net,
                &cfg,
                2,
                &corpus.pairs[0].src,
                10,
                DecodeMode::Beam(0)
            ),
            Err(DecodeError::BeamWidth)
        ));
    }

    #[test]
    fn wider_beam_scores_at_least_as_well() {
        let (model, corpus) = setup();
        let cfg = MetaKConfig::default();
        let net = MetaKNetwork::zeros(&cfg);
        let score = |src: &[TokenId], out: &Decoded| {
            let mut s = 0.0;
            let mut full = out.tokens.clone();
            if !out.truncated {
                full.push(EOS);
            }
            for t in 0..full.len() {
                s += model.next_token_dist(src, &full[..t]).unwrap()[full[t].index()].ln();
            }
            s
        };
        for p in corpus.pairs.iter().take(8) {
            let g = decode(&model, None, &net, &cfg, 1, &p.src, 8, DecodeMode::Greedy).unwrap();
            let b = decode(&model, None, &net, &cfg, 1, &p.src, 8, DecodeMode::Beam(4)).unwrap();
            if !g.truncated && !b.truncated {
                assert!(score(&p.src, &b) >= score(&p.src, &g) - 1e-9);
            }
        }
    }

    #[test]
    fn truncation_flag() {
        let (model, corpus) = setup();
        let cfg = MetaKConfig::default();
        let net = MetaKNetwork::zeros(&cfg);
        let out = decode(&model, None, &net, &cfg, 1, &corpus.pairs[0].src, 0, DecodeMode::Greedy).unwrap();
        assert!(out.truncated && out.tokens.is_empty());
    }

    #[test]
    fn exact_retrieval_beats_base_on_memorized_pairs() {
        let (model, corpus) = setup();
        let index = index_for(&model, &corpus);
        let cfg = MetaKConfig::default();
        let mut net = MetaKNetwork::zeros(&cfg);
        // Gate fixed on k = 1.
        let mut p = net.params();
        let n = p.len();
        p[n - net.n_outputs() + 1] = 50.0;
        net.set_params(&p).unwrap();
        let dec = KnnDecoder {
            model: &model,
            index: Some(&index),
            net: &net,
            cfg: &cfg,
            n_probe: 4,
        };
        let knn = teacher_forced_accuracy(&corpus, |s, pre| dec.step(s, pre).map(|s| s.dist)).unwrap();
        let base = teacher_forced_accuracy(&corpus, |s, pre| model.next_token_dist(s, pre)).unwrap();
        assert_eq!(knn.total, corpus.target_tokens());
        assert!(knn.correct > base.correct, "{knn:?} vs {base:?}");
    }

    #[test]
    fn record_json_shape() {
        let out = Decoded {
            tokens: vec![TokenId(5), TokenId(6)],
            truncated: false,
            gates: vec![None, Some(vec![0.5, 0.5])],
        };
        let plain = serde_json::to_string(&DecodeRecord::new(&[TokenId(9)], &out, false)).unwrap();
        assert_eq!(plain, r#"{"source":[9],"hypothesis":[5,6],"truncated":false}"#);
        let with = serde_json::to_string(&DecodeRecord::new(&[TokenId(9)], &out, true)).unwrap();
        assert!(with.ends_with(r#""chosen_k":[null,[0.5,0.5]]}"#));
    }

    #[test]
    fn accuracy_percent() {
        assert_eq!(Accuracy::default().percent(), 0.0);
        assert_eq!(Accuracy { correct: 1, total: 4 }.percent(), 25.0);
    }
}
