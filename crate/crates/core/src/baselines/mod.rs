//! Sequence models, synthetic domains, partitioners and the model-based
//! federated baselines.

mod corpus;
mod ensemble;
mod fedavg;
mod model;
mod partition;
mod trace;

pub use corpus::{
    is_reserved, make_domain_corpus, read_corpus, write_corpus, CorpusError, DomainLanguage, EOS, RESERVED, SRC_TAG,
    TGT_TAG,
};
pub use ensemble::{ft_ensemble_predict, ft_ensemble_run, EnsembleError, EnsembleMode, FtEnsembleOutcome};
pub use fedavg::{fedavg_aggregate, fedavg_run, AggregationFreq, FedAvgConfig, FedAvgError, FedAvgOutcome};
pub use model::{corpus_nll, ModelError, SequenceModel, ToyModel};
pub use partition::{alpha_mix_sizes, even_shares, partition, Partition, PartitionError, PartitionMode, PartitionSpec};
pub use trace::{write_trace, TraceModel, TRACE_MAGIC};
