//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default; unknown keys and unparsable values are reported together.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use fednn_core::baselines::{AggregationFreq, PartitionMode};
use fednn_core::inference::{DistanceKernel, MetaKConfig, MetaKTrainConfig};
use fednn_core::quantizer::PQConfig;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("invalid configuration: {}", .issues.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
pub struct ConfigError {
    pub issues: Vec<ConfigIssue>,
}

impl ConfigError {
    pub fn keys(&self) -> Vec<&str> {
        self.issues.iter().map(|i| i.key.as_str()).collect()
    }

    fn single(key: &str, message: impl Into<String>) -> Self {
        Self {
            issues: vec![ConfigIssue {
                key: key.to_string(),
                message: message.into(),
            }],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ExpMethod {
    FedNN,
    FedAvg,
    FtEnsemble,
    Public,
    Centralized,
}

impl ExpMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            ExpMethod::FedNN => "fednn",
            ExpMethod::FedAvg => "fedavg",
            ExpMethod::FtEnsemble => "ft_ensemble",
            ExpMethod::Public => "public",
            ExpMethod::Centralized => "centralized",
        }
    }
}

impl FromStr for ExpMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "fednn" => Ok(ExpMethod::FedNN),
            "fedavg" => Ok(ExpMethod::FedAvg),
            "ft_ensemble" => Ok(ExpMethod::FtEnsemble),
            "public" => Ok(ExpMethod::Public),
            "centralized" => Ok(ExpMethod::Centralized),
            other => Err(format!("unknown method {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnsembleWeighting {
    Mean,
    Weighted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedAvgSettings {
    pub rounds: usize,
    pub freq: AggregationFreq,
    pub local_steps: usize,
    pub lr: f64,
    pub server_data: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: PartitionMode,
    pub n_clients: usize,
    pub n_domains: usize,
    pub alpha: f64,
    pub beta: Option<f64>,
    pub vocab: usize,
    pub dim: usize,
    pub train_pairs: usize,
    pub dev_pairs: usize,
    pub test_pairs: usize,
    pub public_pairs: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub data_seed: u64,
    pub model_seed: u64,
    pub public_steps: usize,
    pub public_lr: f64,
    pub pq: PQConfig,
    pub metak: MetaKConfig,
    pub metak_train: MetaKTrainConfig,
    pub metak_seed: u64,
    pub methods: Vec<ExpMethod>,
    pub fedavg: FedAvgSettings,
    pub ft_steps: usize,
    pub ft_lr: f64,
    pub ft_mode: EnsembleWeighting,
    pub central_steps: usize,
    pub central_lr: f64,
    pub seal_seed: u64,
    pub shuffle_seed: u64,
    pub cost_m_mb: Option<f64>,
    pub cost_d_mb: Option<f64>,
    pub output: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: PartitionMode::NonIid,
            n_clients: 3,
            n_domains: 3,
            alpha: 0.0,
            beta: None,
            vocab: 64,
            dim: 32,
            train_pairs: 2000,
            dev_pairs: 200,
            test_pairs: 200,
            public_pairs: 2000,
            len_min: 5,
            len_max: 12,
            data_seed: 11,
            model_seed: 7,
            public_steps: 100,
            public_lr: 1.0,
            pq: PQConfig::desk(),
            metak: MetaKConfig::default(),
            metak_train: MetaKTrainConfig {
                seed: 1,
                ..MetaKTrainConfig::default()
            },
            metak_seed: 1,
            methods: vec![ExpMethod::Public, ExpMethod::FedNN],
            fedavg: FedAvgSettings {
                rounds: 20,
                freq: AggregationFreq::Every(1),
                local_steps: 1,
                lr: 1.0,
                server_data: false,
            },
            ft_steps: 20,
            ft_lr: 1.0,
            ft_mode: EnsembleWeighting::Mean,
            central_steps: 20,
            central_lr: 1.0,
            seal_seed: 3,
            shuffle_seed: 5,
            cost_m_mb: None,
            cost_d_mb: None,
            output: None,
        }
    }
}

/// Collects typed values from the raw key map, remembering which keys were
/// read and which failed to parse.
struct Reader {
    raw: BTreeMap<String, String>,
    used: BTreeSet<String>,
    issues: Vec<ConfigIssue>,
}

impl Reader {
    fn with<T>(&mut self, key: &str, slot: &mut T, parse: impl Fn(&str) -> Result<T, String>) {
        self.used.insert(key.to_string());
        if let Some(v) = self.raw.get(key) {
            match parse(v) {
                Ok(x) => *slot = x,
                Err(message) => self.issues.push(ConfigIssue {
                    key: key.to_string(),
                    message,
                }),
            }
        }
    }

    fn get<T: FromStr>(&mut self, key: &str, slot: &mut T)
    where
        T::Err: fmt::Display,
    {
        self.with(key, slot, |v| v.parse::<T>().map_err(|e| format!("{v:?}: {e}")));
    }

    fn opt<T: FromStr>(&mut self, key: &str, slot: &mut Option<T>)
    where
        T::Err: fmt::Display,
    {
        self.with(key, slot, |v| {
            if v.is_empty() || v == "none" {
                Ok(None)
            } else {
                v.parse::<T>().map(Some).map_err(|e| format!("{v:?}: {e}"))
            }
        });
    }

    fn check(&mut self, key: &str, ok: bool, message: &str) {
        if !ok && !self.issues.iter().any(|i| i.key == key) {
            self.issues.push(ConfigIssue {
                key: key.to_string(),
                message: message.to_string(),
            });
        }
    }
}

fn parse_scenario(v: &str) -> Result<PartitionMode, String> {
    match v {
        "non_iid" => Ok(PartitionMode::NonIid),
        "iid" => Ok(PartitionMode::Iid),
        "alpha_mix" => Ok(PartitionMode::AlphaMix),
        "client_scale" => Ok(PartitionMode::ClientScale),
        _ => Err(format!("unknown scenario {v:?}")),
    }
}

fn scenario_name(m: PartitionMode) -> &'static str {
    match m {
        PartitionMode::NonIid => "non_iid",
        PartitionMode::Iid => "iid",
        PartitionMode::AlphaMix => "alpha_mix",
        PartitionMode::ClientScale => "client_scale",
    }
}

fn parse_freq(v: &str) -> Result<AggregationFreq, String> {
    match v {
        "inf" | "once" => Ok(AggregationFreq::Once),
        _ => match v.parse::<usize>() {
            Ok(k) if k >= 1 => Ok(AggregationFreq::Every(k)),
            _ => Err(format!("{v:?}: expected a positive integer or \"inf\"")),
        },
    }
}

fn parse_methods(v: &str) -> Result<Vec<ExpMethod>, String> {
    let mut out: Vec<ExpMethod> = Vec::new();
    for part in v.split(',').filter(|p| !p.trim().is_empty()) {
        let m = part.parse::<ExpMethod>()?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err("method list is empty".into());
    }
    Ok(out)
}

fn parse_kernel(v: &str) -> Result<DistanceKernel, String> {
    match v {
        "linear" => Ok(DistanceKernel::Linear),
        "squared" => Ok(DistanceKernel::Squared),
        _ => Err(format!("unknown kernel {v:?}")),
    }
}

fn parse_weighting(v: &str) -> Result<EnsembleWeighting, String> {
    match v {
        "mean" => Ok(EnsembleWeighting::Mean),
        "weighted" => Ok(EnsembleWeighting::Weighted),
        _ => Err(format!("unknown ensemble mode {v:?}")),
    }
}

impl ExperimentConfig {
    /// Parses a config file body.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut raw = BTreeMap::new();
        let mut issues = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    let k = k.trim().to_string();
                    if raw.insert(k.clone(), v.trim().to_string()).is_some() {
                        issues.push(ConfigIssue {
                            key: k,
                            message: format!("duplicate key on line {}", no + 1),
                        });
                    }
                }
                None => issues.push(ConfigIssue {
                    key: format!("line {}", no + 1),
                    message: "expected key = value".into(),
                }),
            }
        }
        Self::from_map(raw, issues)
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self, ConfigError> {
        let raw = pairs.into_iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        Self::from_map(raw, Vec::new())
    }

    fn from_map(raw: BTreeMap<String, String>, issues: Vec<ConfigIssue>) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        let mut r = Reader {
            raw,
            used: BTreeSet::new(),
            issues,
        };
        r.with("scenario", &mut c.scenario, parse_scenario);
        r.get("n_clients", &mut c.n_clients);
        r.get("n_domains", &mut c.n_domains);
        r.get("alpha", &mut c.alpha);
        r.opt("beta", &mut c.beta);
        r.get("vocab", &mut c.vocab);
        r.get("dim", &mut c.dim);
        r.get("train_pairs", &mut c.train_pairs);
        r.get("dev_pairs", &mut c.dev_pairs);
        r.get("test_pairs", &mut c.test_pairs);
        r.get("public_pairs", &mut c.public_pairs);
        r.get("len_min", &mut c.len_min);
        r.get("len_max", &mut c.len_max);
        r.get("data_seed", &mut c.data_seed);
        r.get("model_seed", &mut c.model_seed);
        r.get("public_steps", &mut c.public_steps);
        r.get("public_lr", &mut c.public_lr);
        r.get("pq.n_coarse", &mut c.pq.n_coarse);
        r.get("pq.m", &mut c.pq.m);
        r.get("pq.bits", &mut c.pq.bits);
        r.get("pq.n_probe", &mut c.pq.n_probe);
        r.get("pq.iters", &mut c.pq.kmeans_iters);
        r.get("pq.seed", &mut c.pq.seed);
        r.get("metak.k", &mut c.metak.k_max);
        r.get("metak.hidden", &mut c.metak.hidden);
        r.get("metak.temperature", &mut c.metak.temperature);
        r.get("metak.sentinel", &mut c.metak.sentinel);
        r.get("metak.normalize", &mut c.metak.normalize_distances);
        r.with("metak.kernel", &mut c.metak.kernel, parse_kernel);
        r.get("metak.epochs", &mut c.metak_train.epochs);
        r.get("metak.lr", &mut c.metak_train.lr);
        r.get("metak.batch", &mut c.metak_train.batch_size);
        r.get("metak.seed", &mut c.metak_seed);
        r.with("methods", &mut c.methods, parse_methods);
        r.get("fedavg.rounds", &mut c.fedavg.rounds);
        r.with("fedavg.freq", &mut c.fedavg.freq, parse_freq);
        r.get("fedavg.local_steps", &mut c.fedavg.local_steps);
        r.get("fedavg.lr", &mut c.fedavg.lr);
        r.get("fedavg.server_data", &mut c.fedavg.server_data);
        r.get("ft.steps", &mut c.ft_steps);
        r.get("ft.lr", &mut c.ft_lr);
        r.with("ft.mode", &mut c.ft_mode, parse_weighting);
        r.get("central.steps", &mut c.central_steps);
        r.get("central.lr", &mut c.central_lr);
        r.get("seal.seed", &mut c.seal_seed);
        r.get("shuffle.seed", &mut c.shuffle_seed);
        r.opt("cost.m_mb", &mut c.cost_m_mb);
        r.opt("cost.d_mb", &mut c.cost_d_mb);
        r.opt("output", &mut c.output);
        c.metak_train.seed = c.metak_seed;

        let unknown: Vec<String> = r.raw.keys().filter(|k| !r.used.contains(*k)).cloned().collect();
        for key in unknown {
            r.issues.push(ConfigIssue {
                key,
                message: "unknown key".into(),
            });
        }

        r.check("n_clients", c.n_clients >= 1, "must be at least 1");
        r.check("n_domains", c.n_domains >= 1, "must be at least 1");
        r.check("alpha", (0.0..=1.0).contains(&c.alpha), "must lie in [0, 1]");
        r.check("beta", c.beta.is_none_or(|b| b > 0.0 && b <= 1.0), "must lie in (0, 1]");
        r.check(
            "vocab",
            c.vocab > 4 && c.vocab <= u16::MAX as usize,
            "must exceed 4 and fit in 16 bits",
        );
        r.check("dim", c.dim >= 1, "must be at least 1");
        r.check("len_min", c.len_min >= 1, "must be at least 1");
        r.check("len_max", c.len_max >= c.len_min, "must be at least len_min");
        r.check("public_pairs", c.public_pairs >= 1, "must be at least 1");
        r.check(
            "public_lr",
            c.public_lr.is_finite() && c.public_lr >= 0.0,
            "must be non-negative",
        );
        if let Err(e) = c.pq.validate(c.dim) {
            r.check("pq", false, &e.to_string());
        }
        if let Err(e) = c.metak.validate() {
            r.check("metak", false, &e.to_string());
        }
        r.check("metak.batch", c.metak_train.batch_size >= 1, "must be at least 1");
        r.check("fedavg.rounds", c.fedavg.rounds >= 1, "must be at least 1");
        r.check("cost.m_mb", c.cost_m_mb.is_none_or(|v| v > 0.0), "must be positive");
        r.check("cost.d_mb", c.cost_d_mb.is_none_or(|v| v > 0.0), "must be positive");
        let needs_match = matches!(c.scenario, PartitionMode::NonIid | PartitionMode::AlphaMix);
        r.check(
            "n_clients",
            !needs_match || c.n_clients == c.n_domains,
            "must equal n_domains for this scenario",
        );
        r.check(
            "n_clients",
            c.scenario != PartitionMode::ClientScale || c.n_clients % c.n_domains.max(1) == 0,
            "must be a multiple of n_domains for client_scale",
        );

        if r.issues.is_empty() {
            Ok(c)
        } else {
            Err(ConfigError { issues: r.issues })
        }
    }

    /// Every key with its resolved value.
    pub fn resolved(&self) -> BTreeMap<&'static str, String> {
        let opt = |v: &Option<f64>| v.map_or("none".to_string(), |x| x.to_string());
        let freq = match self.fedavg.freq {
            AggregationFreq::Every(k) => k.to_string(),
            AggregationFreq::Once => "inf".into(),
        };
        let kernel = match self.metak.kernel {
            DistanceKernel::Linear => "linear",
            DistanceKernel::Squared => "squared",
        };
        let ft_mode = match self.ft_mode {
            EnsembleWeighting::Mean => "mean",
            EnsembleWeighting::Weighted => "weighted",
        };
        let methods: Vec<&str> = self.methods.iter().map(|m| m.as_str()).collect();
        BTreeMap::from([
            ("scenario", scenario_name(self.scenario).to_string()),
            ("n_clients", self.n_clients.to_string()),
            ("n_domains", self.n_domains.to_string()),
            ("alpha", self.alpha.to_string()),
            ("beta", opt(&self.beta)),
            ("vocab", self.vocab.to_string()),
            ("dim", self.dim.to_string()),
            ("train_pairs", self.train_pairs.to_string()),
            ("dev_pairs", self.dev_pairs.to_string()),
            ("test_pairs", self.test_pairs.to_string()),
            ("public_pairs", self.public_pairs.to_string()),
            ("len_min", self.len_min.to_string()),
            ("len_max", self.len_max.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("model_seed", self.model_seed.to_string()),
            ("public_steps", self.public_steps.to_string()),
            ("public_lr", self.public_lr.to_string()),
            ("pq.n_coarse", self.pq.n_coarse.to_string()),
            ("pq.m", self.pq.m.to_string()),
            ("pq.bits", self.pq.bits.to_string()),
            ("pq.n_probe", self.pq.n_probe.to_string()),
            ("pq.iters", self.pq.kmeans_iters.to_string()),
            ("pq.seed", self.pq.seed.to_string()),
            ("metak.k", self.metak.k_max.to_string()),
            ("metak.hidden", self.metak.hidden.to_string()),
            ("metak.temperature", self.metak.temperature.to_string()),
            ("metak.sentinel", self.metak.sentinel.to_string()),
            ("metak.normalize", self.metak.normalize_distances.to_string()),
            ("metak.kernel", kernel.to_string()),
            ("metak.epochs", self.metak_train.epochs.to_string()),
            ("metak.lr", self.metak_train.lr.to_string()),
            ("metak.batch", self.metak_train.batch_size.to_string()),
            ("metak.seed", self.metak_seed.to_string()),
            ("methods", methods.join(",")),
            ("fedavg.rounds", self.fedavg.rounds.to_string()),
            ("fedavg.freq", freq),
            ("fedavg.local_steps", self.fedavg.local_steps.to_string()),
            ("fedavg.lr", self.fedavg.lr.to_string()),
            ("fedavg.server_data", self.fedavg.server_data.to_string()),
            ("ft.steps", self.ft_steps.to_string()),
            ("ft.lr", self.ft_lr.to_string()),
            ("ft.mode", ft_mode.to_string()),
            ("central.steps", self.central_steps.to_string()),
            ("central.lr", self.central_lr.to_string()),
            ("seal.seed", self.seal_seed.to_string()),
            ("shuffle.seed", self.shuffle_seed.to_string()),
            ("cost.m_mb", opt(&self.cost_m_mb)),
            ("cost.d_mb", opt(&self.cost_d_mb)),
            ("output", self.output.clone().unwrap_or_else(|| "none".into())),
        ])
    }

    /// Canonical `key = value` text; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        self.resolved().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 over the canonical text, minus the output path, which does not
    /// influence results.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.resolved() {
            if k != "output" {
                h.update(format!("{k} = {v}\n").as_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Overrides the output path.
    pub fn set_output(&mut self, path: &str) -> Result<(), ConfigError> {
        if path.is_empty() {
            return Err(ConfigError::single("output", "empty path"));
        }
        self.output = Some(path.to_string());
        Ok(())
    }
}
