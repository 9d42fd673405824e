//! Retrieval-augmented decoding: neighbour distributions, the Meta-k gate,
//! the gated ensemble and the decoding loop.

mod decode;
mod knn;
mod metak;

pub use decode::{
    argmax, decode, teacher_forced_accuracy, Accuracy, DecodeError, DecodeMode, DecodeRecord, Decoded, KnnDecoder, Step,
};
pub use knn::{knn_distribution, meta_features, DistanceKernel, InferenceError, MetaKConfig, RetrievalSet};
pub use metak::{
    component_distributions, ensemble_predict, meta_k_forward, mix_with_weights, train_meta_k, MetaKExample,
    MetaKNetwork, MetaKTrainConfig, METAK_MAGIC, METAK_VERSION,
};
