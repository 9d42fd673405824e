//! Key encryption: inverted-file product quantization and ADC search.

mod index;
mod kmeans;
mod pq;

pub use index::{EncodedStore, Neighbor, PQIndex, SearchError, ENCODED_STORE_MAGIC};
pub use kmeans::{kmeans, KMeans};
pub use pq::{train_pq, EncodedKey, LookupTables, PQConfig, PQModel, QuantizerError, PQ_MAGIC, PQ_VERSION};
