//! Leakage measurement for shared memories: threat datasets, the privacy
//! dictionary, hit precision/recall/F1, reconstruction BLEU and attackers.

mod attack;
mod metrics;

pub use attack::{
    build_threat_dataset, evaluate_attack, nn_baseline_attack, AttackError, Attacker, NearestNeighborAttacker,
    PrivacyReport, ThreatKey, ThreatSample,
};
pub use metrics::{
    dictionary_from_counts, extract_privacy_dictionary, privacy_prf, reconstruction_bleu, token_counts, MetricError,
    Prf, PrivacyDictionary, DEFAULT_TAU,
};
