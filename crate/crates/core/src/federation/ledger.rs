//! Communication accounting and closed-form cost models.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::network::{MessageKind, NodeId};

const MB: f64 = 1024.0 * 1024.0;
const GB: f64 = 1024.0 * MB;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[serde(rename = "fedavg")]
    FedAvg,
    FtEnsemble,
    #[serde(rename = "fednn")]
    FedNN,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::FedAvg => "fedavg",
            Method::FtEnsemble => "ft-ensemble",
            Method::FedNN => "fednn",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = CostError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "fedavg" => Ok(Method::FedAvg),
            "ft-ensemble" => Ok(Method::FtEnsemble),
            "fednn" => Ok(Method::FedNN),
            _ => Err(CostError::UnknownMethod(s.to_string())),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("unknown method {0:?}")]
    UnknownMethod(String),
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
}

/// Closed-form total communication in GB, rounded to two decimals.
///
/// * FedAvg: `M·N·R·2`
/// * FT-Ensemble: `M·N·(N+1)`
/// * FedNN: `M·N + D·(N−1)`
///
/// `m_mb` and `d_mb` are in MB; GB = MB / 1024. `r_rounds` is only read for
/// FedAvg and `d_mb` only for FedNN.
pub fn closed_form_comm(method: Method, m_mb: f64, n: usize, r_rounds: usize, d_mb: f64) -> Result<f64, CostError> {
    let positive = |name, value: f64| {
        if value > 0.0 && value.is_finite() {
            Ok(value)
        } else {
            Err(CostError::NonPositive { name, value })
        }
    };
    let m = positive("M", m_mb)?;
    let n = positive("N", n as f64)?;
    let mb = match method {
        Method::FedAvg => m * n * positive("R", r_rounds as f64)? * 2.0,
        Method::FtEnsemble => m * n * (n + 1.0),
        Method::FedNN => m * n + positive("D", d_mb)? * (n - 1.0),
    };
    Ok(round2(mb / 1024.0))
}

/// Rounds to two decimals, ties to even (388.125 → 388.12).
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round_ties_even() / 100.0
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Tally {
    pub messages: u64,
    pub bytes: u64,
}

/// Byte totals per (message kind, sender), plus the unit constants that the
/// closed-form models are expressed in.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CostLedger {
    entries: BTreeMap<(MessageKind, NodeId), Tally>,
    pub method: Option<Method>,
    /// One copy of everything the server broadcasts as "the model" (bytes).
    pub model_bytes: u64,
    /// Total sealed-store bytes uploaded by all clients.
    pub store_bytes: u64,
    pub n_clients: usize,
    pub rounds: usize,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, kind: MessageKind, sender: NodeId, _receiver: NodeId, bytes: u64) {
        let t = self.entries.entry((kind, sender)).or_default();
        t.messages += 1;
        t.bytes += bytes;
    }

    pub fn total_bytes(&self) -> u64 {
        self.entries.values().map(|t| t.bytes).sum()
    }

    pub fn total_messages(&self) -> u64 {
        self.entries.values().map(|t| t.messages).sum()
    }

    pub fn bytes(&self, kind: MessageKind) -> u64 {
        self.entries
            .iter()
            .filter(|((k, _), _)| *k == kind)
            .map(|(_, t)| t.bytes)
            .sum()
    }

    pub fn messages(&self, kind: MessageKind) -> u64 {
        self.entries
            .iter()
            .filter(|((k, _), _)| *k == kind)
            .map(|(_, t)| t.messages)
            .sum()
    }

    pub fn tally(&self, kind: MessageKind, sender: NodeId) -> Tally {
        self.entries.get(&(kind, sender)).copied().unwrap_or_default()
    }

    pub fn entries(&self) -> impl Iterator<Item = (MessageKind, NodeId, Tally)> + '_ {
        self.entries.iter().map(|((k, s), t)| (*k, *s, *t))
    }

    pub fn measured_gb(&self) -> f64 {
        self.total_bytes() as f64 / GB
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LedgerReport {
    pub method: Option<Method>,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "M_mb")]
    pub m_mb: f64,
    #[serde(rename = "D_mb")]
    pub d_mb: f64,
    #[serde(rename = "R")]
    pub r: usize,
    pub total_bytes: u64,
    pub total_messages: u64,
    pub bytes_by_kind: BTreeMap<&'static str, u64>,
    pub messages_by_kind: BTreeMap<&'static str, u64>,
    pub measured_gb: f64,
    pub closed_form_gb: Option<f64>,
}

pub fn ledger_report(ledger: &CostLedger) -> LedgerReport {
    let m_mb = ledger.model_bytes as f64 / MB;
    let d_mb = ledger.store_bytes as f64 / MB;
    let closed_form_gb = ledger
        .method
        .and_then(|m| closed_form_comm(m, m_mb, ledger.n_clients, ledger.rounds.max(1), d_mb).ok());
    let mut bytes_by_kind = BTreeMap::new();
    let mut messages_by_kind = BTreeMap::new();
    for kind in MessageKind::ALL {
        let b = ledger.bytes(kind);
        if b > 0 || ledger.messages(kind) > 0 {
            bytes_by_kind.insert(kind.name(), b);
            messages_by_kind.insert(kind.name(), ledger.messages(kind));
        }
    }
    LedgerReport {
        method: ledger.method,
        n: ledger.n_clients,
        m_mb,
        d_mb,
        r: ledger.rounds,
        total_bytes: ledger.total_bytes(),
        total_messages: ledger.total_messages(),
        bytes_by_kind,
        messages_by_kind,
        measured_gb: ledger.measured_gb(),
        closed_form_gb,
    }
}
