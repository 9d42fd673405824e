use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::memstore::{KeyVector, ParallelCorpus, TokenId};
use crate::par;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("token {token} outside vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },
    #[error("parameter vector has length {found}, expected {expected}")]
    ParameterLength { expected: usize, found: usize },
    #[error("no trace step recorded for this (source, prefix)")]
    MissingTrace,
    #[error("model does not support training")]
    NotTrainable,
    #[error("vocabulary mismatch: {0} vs {1}")]
    VocabMismatch(usize, usize),
    #[error("trace format: {0}")]
    Format(String),
}

/// A decoder that exposes its per-step context representation.
pub trait SequenceModel: Send + Sync {
    fn vocab_size(&self) -> usize;

    /// Dimension of the context vectors returned by [`SequenceModel::context`].
    fn dim(&self) -> usize;

    /// Decoder context for predicting the token that follows `prefix`.
    fn context(&self, src: &[TokenId], prefix: &[TokenId]) -> Result<KeyVector, ModelError>;

    /// Next-token distribution; sums to one.
    fn next_token_dist(&self, src: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>, ModelError>;

    fn parameters(&self) -> Vec<f32>;

    fn set_parameters(&mut self, params: &[f32]) -> Result<(), ModelError>;

    /// Runs `steps` gradient steps on `corpus` and returns the mean token
    /// NLL measured before the final step.
    fn train_steps(&mut self, corpus: &ParallelCorpus, steps: usize, lr: f64) -> Result<f64, ModelError>;

    /// Size in bytes of the parameters when shipped over the wire.
    fn parameter_bytes(&self) -> usize {
        self.parameters().len() * 4
    }
}

/// Small trainable stand-in for an NMT decoder.
///
/// Token embeddings are frozen unit vectors drawn from a seeded Gaussian. The
/// context for step `t` is the L2-normalized sum of the mean source embedding,
/// `0.5·E[y_{t-1}]` and `0.25·E[y_{t-2}]`. The only trainable parameter is
/// the output projection `W` (`dim × vocab`), giving `softmax(Wᵀ·context)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    vocab_size: usize,
    dim: usize,
    embeddings: Vec<f64>,
    /// Row-major `dim × vocab`.
    output: Vec<f64>,
}

impl ToyModel {
    pub fn new(vocab_size: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut embeddings = Vec::with_capacity(vocab_size * dim);
        for _ in 0..vocab_size {
            let row: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            embeddings.extend(row.iter().map(|v| v / norm));
        }
        Self {
            vocab_size,
            dim,
            embeddings,
            output: vec![0.0; dim * vocab_size],
        }
    }

    pub fn embedding(&self, t: TokenId) -> &[f64] {
        &self.embeddings[t.index() * self.dim..(t.index() + 1) * self.dim]
    }

    fn check(&self, tokens: &[TokenId]) -> Result<(), ModelError> {
        match tokens.iter().find(|t| t.index() >= self.vocab_size) {
            Some(t) => Err(ModelError::TokenOutOfRange {
                token: t.0,
                vocab_size: self.vocab_size,
            }),
            None => Ok(()),
        }
    }

    fn context_f64(&self, src: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>, ModelError> {
        self.check(src)?;
        self.check(prefix)?;
        let mut c = vec![0.0f64; self.dim];
        if !src.is_empty() {
            let w = 1.0 / src.len() as f64;
            for &t in src {
                for (ci, e) in c.iter_mut().zip(self.embedding(t)) {
                    *ci += w * e;
                }
            }
        }
        for (back, weight) in [(1usize, 0.5f64), (2, 0.25)] {
            if prefix.len() >= back {
                let t = prefix[prefix.len() - back];
                for (ci, e) in c.iter_mut().zip(self.embedding(t)) {
                    *ci += weight * e;
                }
            }
        }
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            c.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(c)
    }

    /// `softmax(Wᵀ·context)` for an arbitrary context vector.
    pub fn dist_from_context(&self, context: &[f64]) -> Vec<f64> {
        let mut logits = vec![0.0f64; self.vocab_size];
        for (i, &ci) in context.iter().enumerate() {
            if ci == 0.0 {
                continue;
            }
            let row = &self.output[i * self.vocab_size..(i + 1) * self.vocab_size];
            for (l, w) in logits.iter_mut().zip(row) {
                *l += ci * w;
            }
        }
        softmax_in_place(&mut logits);
        logits
    }

    /// Mean token NLL of `corpus` under the current parameters.
    pub fn mean_nll(&self, corpus: &ParallelCorpus) -> Result<f64, ModelError> {
        let steps = self.training_steps(corpus)?;
        Ok(self.nll_and_grad(&steps, false).0)
    }

    fn training_steps(&self, corpus: &ParallelCorpus) -> Result<Vec<(Vec<f64>, TokenId)>, ModelError> {
        let per_pair = par::try_map(&corpus.pairs, |p| {
            self.check(&p.tgt)?;
            (0..p.tgt.len())
                .map(|t| Ok((self.context_f64(&p.src, &p.tgt[..t])?, p.tgt[t])))
                .collect::<Result<Vec<_>, ModelError>>()
        })?;
        Ok(per_pair.into_iter().flatten().collect())
    }

    fn nll_and_grad(&self, steps: &[(Vec<f64>, TokenId)], want_grad: bool) -> (f64, Vec<f64>) {
        if steps.is_empty() {
            return (0.0, vec![0.0; self.output.len()]);
        }
        const CHUNK: usize = 256;
        let n_chunks = steps.len().div_ceil(CHUNK);
        let partials = par::map_range(n_chunks, |c| {
            let mut loss = 0.0;
            let mut grad = if want_grad {
                vec![0.0; self.output.len()]
            } else {
                Vec::new()
            };
            for (ctx, gold) in &steps[c * CHUNK..((c + 1) * CHUNK).min(steps.len())] {
                let mut p = self.dist_from_context(ctx);
                loss -= p[gold.index()].max(1e-300).ln();
                if want_grad {
                    p[gold.index()] -= 1.0;
                    for (i, &ci) in ctx.iter().enumerate() {
                        let row = &mut grad[i * self.vocab_size..(i + 1) * self.vocab_size];
                        for (g, pv) in row.iter_mut().zip(&p) {
                            *g += ci * pv;
                        }
                    }
                }
            }
            (loss, grad)
        });
        let n = steps.len() as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; if want_grad { self.output.len() } else { 0 }];
        for (l, g) in partials {
            loss += l;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        grad.iter_mut().for_each(|g| *g /= n);
        (loss / n, grad)
    }
}

impl SequenceModel for ToyModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn context(&self, src: &[TokenId], prefix: &[TokenId]) -> Result<KeyVector, ModelError> {
        Ok(self.context_f64(src, prefix)?.into_iter().map(|v| v as f32).collect())
    }

    fn next_token_dist(&self, src: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>, ModelError> {
        Ok(self.dist_from_context(&self.context_f64(src, prefix)?))
    }

    fn parameters(&self) -> Vec<f32> {
        self.output.iter().map(|&v| v as f32).collect()
    }

    fn set_parameters(&mut self, params: &[f32]) -> Result<(), ModelError> {
        if params.len() != self.output.len() {
            return Err(ModelError::ParameterLength {
                expected: self.output.len(),
                found: params.len(),
            });
        }
        self.output = params.iter().map(|&v| v as f64).collect();
        Ok(())
    }

    fn train_steps(&mut self, corpus: &ParallelCorpus, steps: usize, lr: f64) -> Result<f64, ModelError> {
        let data = self.training_steps(corpus)?;
        let mut last = self.nll_and_grad(&data, false).0;
        for _ in 0..steps {
            let (loss, grad) = self.nll_and_grad(&data, true);
            last = loss;
            for (w, g) in self.output.iter_mut().zip(grad) {
                *w -= lr * g;
            }
        }
        Ok(last)
    }
}

/// Mean token NLL of `corpus` under any [`SequenceModel`].
pub fn corpus_nll<M: SequenceModel + ?Sized>(model: &M, corpus: &ParallelCorpus) -> Result<f64, ModelError> {
    let per_pair = par::try_map(&corpus.pairs, |p| {
        let mut nll = 0.0;
        for t in 0..p.tgt.len() {
            let dist = model.next_token_dist(&p.src, &p.tgt[..t])?;
            let gold = p.tgt[t].index();
            let q = *dist.get(gold).ok_or(ModelError::TokenOutOfRange {
                token: p.tgt[t].0,
                vocab_size: dist.len(),
            })?;
            nll -= q.max(f64::MIN_POSITIVE).ln();
        }
        Ok::<_, ModelError>((nll, p.tgt.len()))
    })?;
    let (sum, n) = per_pair
        .into_iter()
        .fold((0.0, 0usize), |(s, n), (a, b)| (s + a, n + b));
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    xs.iter_mut().for_each(|x| *x /= sum);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memstore::SentencePair;

    fn ids(v: &[u32]) -> Vec<TokenId> {
        v.iter().copied().map(TokenId).collect()
    }

    #[test]
    fn context_formula() {
        let m = ToyModel::new(10, 6, 1);
        let src = ids(&[3, 4]);
        let prefix = ids(&[5, 6, 7]);
        let got = m.context(&src, &prefix).unwrap();
        let want: Vec<f64> = (0..6)
            .map(|i| {
                0.5 * (m.embedding(TokenId(3))[i] + m.embedding(TokenId(4))[i])
                    + 0.5 * m.embedding(TokenId(7))[i]
                    + 0.25 * m.embedding(TokenId(6))[i]
            })
            .collect();
        let n = want.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (g, w) in got.iter().zip(&want) {
            assert!((*g as f64 - w / n).abs() < 1e-6);
        }
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let m = ToyModel::new(20, 8, 2);
        for t in 0..20 {
            let n: f64 = m.embedding(TokenId(t)).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn distribution_sums_to_one() {
        let mut m = ToyModel::new(12, 5, 3);
        let params: Vec<f32> = (0..60).map(|i| (i as f32 * 0.37).sin()).collect();
        m.set_parameters(&params).unwrap();
        let d = m.next_token_dist(&ids(&[1, 2]), &ids(&[3])).unwrap();
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(d.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn training_reduces_nll_on_single_pair() {
        let mut m = ToyModel::new(16, 8, 4);
        let mut corpus = ParallelCorpus::new("t", 16);
        corpus.pairs.push(SentencePair {
            src: ids(&[3, 5]),
            tgt: ids(&[7, 9, 0]),
        });
        let before = m.mean_nll(&corpus).unwrap();
        let mut prev = before;
        for _ in 0..50 {
            m.train_steps(&corpus, 1, 0.5).unwrap();
            let now = m.mean_nll(&corpus).unwrap();
            assert!(now <= prev + 1e-12);
            prev = now;
        }
        assert!(prev < before);
    }

    #[test]
    fn generic_nll_matches_toy_nll() {
        let mut m = ToyModel::new(16, 8, 2);
        let mut corpus = ParallelCorpus::new("t", 16);
        corpus.pairs.push(SentencePair {
            src: ids(&[4, 6, 8]),
            tgt: ids(&[5, 0]),
        });
        corpus.pairs.push(SentencePair {
            src: ids(&[9]),
            tgt: ids(&[11, 12, 0]),
        });
        m.train_steps(&corpus, 5, 0.3).unwrap();
        let a = m.mean_nll(&corpus).unwrap();
        let b = corpus_nll(&m, &corpus).unwrap();
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        assert_eq!(corpus_nll(&m, &ParallelCorpus::new("e", 16)).unwrap(), 0.0);
    }

    #[test]
    fn out_of_range_token_rejected() {
        let m = ToyModel::new(4, 2, 0);
        assert!(matches!(
            m.context(&ids(&[9]), &[]),
            Err(ModelError::TokenOutOfRange { token: 9, .. })
        ));
    }

    #[test]
    fn parameters_roundtrip() {
        let mut m = ToyModel::new(4, 2, 0);
        assert!(m.set_parameters(&[0.0; 3]).is_err());
        m.set_parameters(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(m.parameters()[7], 8.0);
        assert_eq!(m.parameter_bytes(), 32);
    }
}
