//! Replays externally computed decoder states.
//!
//! A trace file pairs with a corpus: it stores, for every (pair, timestep)
//! in corpus order, the context vector and next-token distribution some
//! other model produced. Layout (little-endian):
//!
//! ```text
//! "FNTR" | version u32 | dim u32 | vocab u32 | steps u32
//! steps × (dim × f32 context, vocab × f32 distribution)
//! ```

use std::collections::HashMap;

use super::model::{ModelError, SequenceModel};
use crate::memstore::{ByteReader, KeyVector, ParallelCorpus, TokenId};

pub const TRACE_MAGIC: &[u8; 4] = b"FNTR";
pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct TraceModel {
    dim: usize,
    vocab_size: usize,
    steps: HashMap<(Vec<TokenId>, Vec<TokenId>), usize>,
    contexts: Vec<f32>,
    dists: Vec<f64>,
}

/// Records `model`'s context and distribution at every step of `corpus`.
pub fn write_trace<M: SequenceModel + ?Sized>(model: &M, corpus: &ParallelCorpus) -> Result<Vec<u8>, ModelError> {
    let steps = corpus.target_tokens();
    let mut out = Vec::new();
    out.extend_from_slice(TRACE_MAGIC);
    for v in [
        TRACE_VERSION,
        model.dim() as u32,
        model.vocab_size() as u32,
        steps as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for p in &corpus.pairs {
        for t in 0..p.tgt.len() {
            for v in model.context(&p.src, &p.tgt[..t])? {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in model.next_token_dist(&p.src, &p.tgt[..t])? {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

impl TraceModel {
    /// Loads a trace recorded over `corpus`.
    pub fn from_bytes(bytes: &[u8], corpus: &ParallelCorpus) -> Result<Self, ModelError> {
        let fmt = |e: crate::memstore::MemstoreError| ModelError::Format(e.to_string());
        let mut r = ByteReader::new(bytes);
        let magic = r.array::<4>().map_err(fmt)?;
        if &magic != TRACE_MAGIC {
            return Err(ModelError::Format(format!("bad magic {magic:?}")));
        }
        let version = r.u32().map_err(fmt)?;
        if version != TRACE_VERSION {
            return Err(ModelError::Format(format!("unsupported version {version}")));
        }
        let dim = r.u32().map_err(fmt)? as usize;
        let vocab_size = r.u32().map_err(fmt)? as usize;
        let n = r.u32().map_err(fmt)? as usize;
        if n != corpus.target_tokens() {
            return Err(ModelError::Format(format!(
                "trace has {n} steps but corpus has {} target tokens",
                corpus.target_tokens()
            )));
        }
        if vocab_size != corpus.vocab_size {
            return Err(ModelError::VocabMismatch(vocab_size, corpus.vocab_size));
        }
        let mut contexts = Vec::with_capacity(n * dim);
        let mut dists = Vec::with_capacity(n * vocab_size);
        let mut steps = HashMap::with_capacity(n);
        let mut idx = 0;
        for p in &corpus.pairs {
            for t in 0..p.tgt.len() {
                for _ in 0..dim {
                    contexts.push(r.f32().map_err(fmt)?);
                }
                let row: Vec<f64> = (0..vocab_size)
                    .map(|_| r.f32().map(f64::from))
                    .collect::<Result<_, _>>()
                    .map_err(fmt)?;
                let sum: f64 = row.iter().sum();
                if sum.is_nan() || sum <= 0.0 || row.iter().any(|v| *v < 0.0 || !v.is_finite()) {
                    return Err(ModelError::Format(format!("step {idx}: invalid distribution")));
                }
                dists.extend(row.iter().map(|v| v / sum));
                steps.entry((p.src.clone(), p.tgt[..t].to_vec())).or_insert(idx);
                idx += 1;
            }
        }
        if r.remaining() != 0 {
            return Err(ModelError::Format("trailing bytes".into()));
        }
        Ok(Self {
            dim,
            vocab_size,
            steps,
            contexts,
            dists,
        })
    }

    fn lookup(&self, src: &[TokenId], prefix: &[TokenId]) -> Result<usize, ModelError> {
        self.steps
            .get(&(src.to_vec(), prefix.to_vec()))
            .copied()
            .ok_or(ModelError::MissingTrace)
    }
}

impl SequenceModel for TraceModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn context(&self, src: &[TokenId], prefix: &[TokenId]) -> Result<KeyVector, ModelError> {
        let i = self.lookup(src, prefix)?;
        Ok(self.contexts[i * self.dim..(i + 1) * self.dim].to_vec())
    }

    fn next_token_dist(&self, src: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>, ModelError> {
        let i = self.lookup(src, prefix)?;
        Ok(self.dists[i * self.vocab_size..(i + 1) * self.vocab_size].to_vec())
    }

    fn parameters(&self) -> Vec<f32> {
        Vec::new()
    }

    fn set_parameters(&mut self, params: &[f32]) -> Result<(), ModelError> {
        if params.is_empty() {
            Ok(())
        } else {
            Err(ModelError::NotTrainable)
        }
    }

    fn train_steps(&mut self, _: &ParallelCorpus, _: usize, _: f64) -> Result<f64, ModelError> {
        Err(ModelError::NotTrainable)
    }
}
