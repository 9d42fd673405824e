//! Subcommand definitions and handlers.

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Parser, Subcommand};
use fednn_core::baselines::{make_domain_corpus, read_corpus, write_corpus, SequenceModel, ToyModel, TraceModel};
use fednn_core::federation::{closed_form_comm, Method};
use fednn_core::memstore::{build_datastore, ParallelCorpus};
use fednn_core::privacy::{build_threat_dataset, evaluate_attack, extract_privacy_dictionary, NearestNeighborAttacker};
use fednn_core::quantizer::{train_pq, PQConfig};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::experiment::{run_experiment, ExperimentError, REPORT_VERSION};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Protocol(String),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Protocol(_) => 3,
            CliError::Other(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(_) | ExperimentError::Partition(_) => CliError::Config(e.to_string()),
            ExperimentError::Protocol(_) => CliError::Protocol(e.to_string()),
            other => CliError::Other(other.into()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fednn", version, about = "Federated nearest-neighbour translation memories")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 64)]
    pub vocab: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 7)]
    pub model_seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic domain corpora, one `domain<d>.tsv` per domain.
    GenCorpus {
        #[arg(long, default_value_t = 3)]
        domains: u32,
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 11)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        vocab: usize,
        #[arg(long, default_value_t = 5)]
        len_min: usize,
        #[arg(long, default_value_t = 12)]
        len_max: usize,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Build a binary datastore from a corpus file.
    BuildDatastore {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        /// Train the toy model on this corpus first.
        #[arg(long)]
        train_on: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        train_steps: usize,
        #[arg(long, default_value_t = 1.0)]
        lr: f64,
        /// Replay contexts from a trace file instead of the toy model.
        #[arg(long, conflicts_with = "train_on")]
        trace: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment from a config file and emit its JSON report.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Closed-form communication cost in GB.
    Costs {
        #[arg(long)]
        method: String,
        #[arg(long)]
        m_mb: f64,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        r: usize,
        #[arg(long, default_value_t = 0.0)]
        d_mb: f64,
    },
    /// Nearest-neighbour reconstruction attack on a defender corpus.
    PrivacyEval {
        #[arg(long)]
        defender: PathBuf,
        #[arg(long)]
        attacker: PathBuf,
        #[arg(long)]
        public: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        /// Attack PQ-encoded keys instead of raw ones.
        #[arg(long)]
        encrypted: bool,
        #[arg(long, default_value_t = fednn_core::privacy::DEFAULT_TAU)]
        tau: f64,
        #[arg(long, default_value_t = 64)]
        pq_n_coarse: usize,
        #[arg(long, default_value_t = 4)]
        pq_m: usize,
        #[arg(long, default_value_t = 4)]
        pq_bits: u32,
        #[arg(long, default_value_t = 0)]
        pq_seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a run report.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

fn load_corpus(path: &Path, vocab: usize) -> anyhow::Result<ParallelCorpus> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_corpus(BufReader::new(file), &name, vocab).with_context(|| format!("reading {}", path.display()))
}

fn write_out(path: Option<&Path>, body: &str, stdout: &mut dyn Write) -> anyhow::Result<()> {
    match path {
        Some(p) => fs::write(p, body).with_context(|| format!("writing {}", p.display())),
        None => stdout.write_all(body.as_bytes()).context("writing stdout"),
    }
}

/// Parses `args` (program name first) and runs the chosen subcommand.
pub fn run_cli<I, T>(args: I, stdout: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => match e.kind() {
            clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                write!(stdout, "{e}").context("writing stdout")?;
                return Ok(());
            }
            _ => return Err(CliError::Config(e.to_string())),
        },
    };
    execute(cli.command, stdout)
}

pub fn execute(cmd: Command, stdout: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        Command::GenCorpus {
            domains,
            size,
            seed,
            vocab,
            len_min,
            len_max,
            out_dir,
        } => {
            if vocab <= 4 || len_min == 0 || len_max < len_min {
                return Err(CliError::Config("need vocab > 4 and 1 <= len-min <= len-max".into()));
            }
            fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
            for d in 0..domains {
                let corpus = make_domain_corpus(d, size, seed, vocab, len_min..=len_max);
                let path = out_dir.join(format!("domain{d}.tsv"));
                let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                write_corpus(&corpus, std::io::BufWriter::new(file)).context("writing corpus")?;
                writeln!(stdout, "{}\t{}", path.display(), corpus.len()).context("writing stdout")?;
            }
            Ok(())
        }
        Command::BuildDatastore {
            corpus,
            model,
            train_on,
            train_steps,
            lr,
            trace,
            out,
        } => {
            let corpus = load_corpus(&corpus, model.vocab)?;
            let store = if let Some(trace) = trace {
                let bytes = fs::read(&trace).with_context(|| format!("reading {}", trace.display()))?;
                let m = TraceModel::from_bytes(&bytes, &corpus).map_err(|e| CliError::Config(e.to_string()))?;
                build_datastore(&m, &corpus).context("building datastore")?
            } else {
                let mut m = ToyModel::new(model.vocab, model.dim, model.model_seed);
                if let Some(p) = train_on {
                    let data = load_corpus(&p, model.vocab)?;
                    m.train_steps(&data, train_steps, lr).context("training")?;
                }
                build_datastore(&m, &corpus).context("building datastore")?
            };
            fs::write(&out, store.to_bytes()).with_context(|| format!("writing {}", out.display()))?;
            writeln!(
                stdout,
                "{}\t{} records\t{} bytes",
                out.display(),
                store.len(),
                store.serialized_len()
            )
            .context("writing stdout")?;
            Ok(())
        }
        Command::Run { config, output } => {
            let text = fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let mut cfg = ExperimentConfig::parse(&text)?;
            if let Some(o) = &output {
                cfg.set_output(&o.to_string_lossy())?;
            }
            let report = run_experiment(&cfg)?;
            write_out(cfg.output.as_deref().map(Path::new), &report.to_json(), stdout)?;
            Ok(())
        }
        Command::Costs {
            method,
            m_mb,
            n,
            r,
            d_mb,
        } => {
            let method: Method = method
                .parse()
                .map_err(|e: fednn_core::federation::CostError| CliError::Config(e.to_string()))?;
            let gb = closed_form_comm(method, m_mb, n, r, d_mb).map_err(|e| CliError::Config(e.to_string()))?;
            writeln!(stdout, "{gb:.2}").context("writing stdout")?;
            Ok(())
        }
        Command::PrivacyEval {
            defender,
            attacker,
            public,
            model,
            encrypted,
            tau,
            pq_n_coarse,
            pq_m,
            pq_bits,
            pq_seed,
            out,
        } => {
            let defender_c = load_corpus(&defender, model.vocab)?;
            let attacker_c = load_corpus(&attacker, model.vocab)?;
            let public_c = load_corpus(&public, model.vocab)?;
            let dict =
                extract_privacy_dictionary(&defender_c, &public_c, tau).map_err(|e| CliError::Config(e.to_string()))?;
            let m = ToyModel::new(model.vocab, model.dim, model.model_seed);
            let pq = if encrypted {
                let store = build_datastore(&m, &public_c).context("public datastore")?;
                let cfg = PQConfig {
                    n_coarse: pq_n_coarse,
                    m: pq_m,
                    bits: pq_bits,
                    n_probe: pq_n_coarse,
                    kmeans_iters: 25,
                    seed: pq_seed,
                };
                cfg.validate(model.dim).map_err(|e| CliError::Config(e.to_string()))?;
                Some(train_pq(store.keys_flat(), store.dim(), &cfg).context("training quantizer")?)
            } else {
                None
            };
            let records = build_threat_dataset(&defender_c, &m, pq.as_ref()).context("defender threat data")?;
            let aux = build_threat_dataset(&attacker_c, &m, None).context("attacker threat data")?;
            let nn = NearestNeighborAttacker::new(&aux, pq).context("attacker")?;
            let name = defender
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let report = evaluate_attack(&nn, &name, &records, &dict).context("attack")?;
            let mut body = serde_json::to_string_pretty(&report).context("serializing")?;
            body.push('\n');
            write_out(out.as_deref(), &body, stdout)?;
            Ok(())
        }
        Command::Report { input } => {
            let text = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let v: serde_json::Value = serde_json::from_str(&text).context("parsing report")?;
            if v["report_version"] != REPORT_VERSION {
                return Err(CliError::Config(format!(
                    "unsupported report_version {}",
                    v["report_version"]
                )));
            }
            writeln!(stdout, "content_hash\t{}", v["content_hash"].as_str().unwrap_or("")).context("writing stdout")?;
            writeln!(
                stdout,
                "method\tmean_client_acc\tserver_acc\tmeasured_gb\tclosed_form_gb"
            )
            .context("writing stdout")?;
            for m in v["methods"].as_array().into_iter().flatten() {
                let num = |x: &serde_json::Value| x.as_f64().map_or("-".to_string(), |f| format!("{f:.2}"));
                writeln!(
                    stdout,
                    "{}\t{}\t{}\t{}\t{}",
                    m["method"].as_str().unwrap_or("?"),
                    num(&m["mean_client_accuracy"]),
                    num(&m["server_accuracy"]),
                    num(&m["cost"]["measured_gb"]),
                    num(&m["cost"]["closed_form_gb"]),
                )
                .context("writing stdout")?;
            }
            Ok(())
        }
    }
}
