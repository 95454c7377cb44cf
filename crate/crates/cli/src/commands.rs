use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use mitra_core::config::ConfigError;
use mitra_core::corpus::{ingest_file, load_corpus, save_corpus, CorpusError};
use mitra_core::evalkit::{load_gold, run_eval, EvalConfig, EvalError};
use mitra_core::fixtures::{FixtureError, Fixtures, CORPUS_FILE, GOLD_FILE, SYNONYM_FILE};
use mitra_core::index::{IndexError, TieredIndexSet};
use mitra_core::{CorpusStore, ServiceConfig, SessionManager};
use serde_json::{json, Value};
use thiserror::Error;

use crate::server::{serve, AppState};

pub const CONFIG_ENV: &str = "MITRA_CONFIG";

#[derive(Debug, Parser)]
#[command(
    name = "mitra",
    version,
    about = "Private question answering over analysis documentation"
)]
#[command(arg_required_else_help = true)]
pub struct Cli {
    /// Service configuration file.
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub k_retrieve: Option<usize>,
    #[arg(long, global = true)]
    pub k_final: Option<usize>,
    /// Use deterministic stub models regardless of the config.
    #[arg(long, global = true)]
    pub stub_models: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Add analyses and documents from a JSONL file to the stored corpus.
    Ingest { file: PathBuf },
    /// Embed the stored corpus and write both index tiers.
    BuildIndex,
    /// Run the HTTP API.
    Serve {
        #[arg(long)]
        listen: Option<String>,
    },
    /// Score BM25 and dense retrieval against a gold query file.
    Eval {
        gold: PathBuf,
        /// Write the full JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Depth of the BM25 ranking (defaults to k_final).
        #[arg(long)]
        bm25_k: Option<usize>,
    },
    /// Send a query to a running server.
    Query {
        #[command(flatten)]
        target: SessionTarget,
        #[arg(long)]
        text: String,
    },
    /// Accept or reject the proposed analysis.
    Confirm {
        #[command(flatten)]
        target: SessionTarget,
        #[arg(long, conflicts_with = "reject", required_unless_present = "reject")]
        accept: bool,
        #[arg(long)]
        reject: bool,
    },
    /// Return a session to its initial state.
    Reset {
        #[command(flatten)]
        target: SessionTarget,
    },
    /// Write a synthetic corpus, gold queries, synonym table and config.
    GenFixtures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
pub struct SessionTarget {
    /// Session id, or `new` to start one.
    #[arg(long)]
    pub session: String,
    /// Server base URL; defaults to the configured listen address.
    #[arg(long)]
    pub server: Option<String>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Fixture(#[from] FixtureError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Server(String),
}

impl Cli {
    pub fn service_config(&self) -> Result<ServiceConfig, CliError> {
        let mut config = match &self.config {
            Some(path) => ServiceConfig::load(path)?,
            None => ServiceConfig::default(),
        };
        if let Some(k) = self.k_retrieve {
            config.k_retrieve = k;
        }
        if let Some(k) = self.k_final {
            config.k_final = k;
        }
        if self.stub_models {
            config.use_stub_models();
        }
        config.validate()?;
        Ok(config)
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::GenFixtures { out: dir, seed } => gen_fixtures(dir, *seed, out),
        Command::Ingest { file } => ingest(&cli.service_config()?, file, out),
        Command::BuildIndex => build_index(&cli.service_config()?, out),
        Command::Serve { listen } => {
            let mut config = cli.service_config()?;
            if let Some(l) = listen {
                config.listen = l.clone();
            }
            serve_blocking(config, out)
        }
        Command::Eval { gold, report, bm25_k } => eval(&cli.service_config()?, gold, report.as_deref(), *bm25_k, out),
        Command::Query { target, text } => {
            let config = cli.service_config()?;
            let client = Client::new(&config, target)?;
            let id = client.session_id()?;
            print_json(
                out,
                &client.post(&format!("/v1/sessions/{id}/query"), json!({ "text": text }))?,
            )
        }
        Command::Confirm { target, accept, .. } => {
            let config = cli.service_config()?;
            let client = Client::new(&config, target)?;
            let id = client.session_id()?;
            print_json(
                out,
                &client.post(&format!("/v1/sessions/{id}/confirm"), json!({ "accept": accept }))?,
            )
        }
        Command::Reset { target } => {
            let config = cli.service_config()?;
            let client = Client::new(&config, target)?;
            let id = client.session_id()?;
            print_json(out, &client.post(&format!("/v1/sessions/{id}/reset"), json!({}))?)
        }
    }
}

fn print_json(out: &mut dyn Write, value: &Value) -> Result<(), CliError> {
    writeln!(out, "{}", serde_json::to_string_pretty(value).expect("serializable"))?;
    Ok(())
}

fn gen_fixtures(dir: &Path, seed: u64, out: &mut dyn Write) -> Result<(), CliError> {
    let fixtures = Fixtures::generate(seed);
    fixtures.write_to(dir)?;
    let mut config = ServiceConfig::default();
    config.embedder.synonym_table_path = Some(PathBuf::from(SYNONYM_FILE));
    std::fs::write(dir.join("mitra.toml"), config.to_toml_string())?;
    writeln!(
        out,
        "wrote {CORPUS_FILE}, {GOLD_FILE}, {SYNONYM_FILE} and mitra.toml to {} ({} records, {} gold queries)",
        dir.display(),
        fixtures.records.len(),
        fixtures.gold.len()
    )?;
    Ok(())
}

fn ingest(config: &ServiceConfig, file: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let mut store = if config.corpus_path.exists() {
        load_corpus(&config.corpus_path)?
    } else {
        CorpusStore::new()
    };
    let summary = ingest_file(&mut store, file)?;
    store.validate()?;
    if let Some(parent) = config.corpus_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    save_corpus(&store, &config.corpus_path)?;
    writeln!(
        out,
        "ingested {} analyses, {} documents, {} chunks; skipped {} stale documents; corpus now has {} chunks",
        summary.analyses,
        summary.documents,
        summary.chunks_created,
        summary.stale.len(),
        store.chunk_count()
    )?;
    Ok(())
}

fn build_index(config: &ServiceConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let store = load_corpus(&config.corpus_path)?;
    let models = config.build_models(config.transport()?)?;
    let indexes = TieredIndexSet::build(&store, models.embedder.as_ref())?;
    indexes.save(&config.index_dir)?;
    writeln!(
        out,
        "indexed {} abstracts and {} chunks into {}",
        indexes.abstracts().len(),
        indexes.fulltext_entry_count(),
        config.index_dir.display()
    )?;
    Ok(())
}

fn eval(
    config: &ServiceConfig,
    gold: &Path,
    report_path: Option<&Path>,
    bm25_k: Option<usize>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let engine = config.open_engine(config.transport()?)?;
    let gold = load_gold(gold)?;
    let report = run_eval(&engine, &gold, EvalConfig { bm25_k })?;
    writeln!(out, "{}", report.precision_recall_table())?;
    write!(out, "{}", report.rank_table())?;
    if let Some(p) = report_path {
        report.save_json(p)?;
    }
    Ok(())
}

fn serve_blocking(config: ServiceConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let engine = config.open_engine(config.transport()?)?;
    let state = Arc::new(AppState::new(engine, SessionManager::new(config.idle_expiry())));
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&config.listen).await?;
        writeln!(out, "listening on http://{}", listener.local_addr()?)?;
        out.flush()?;
        serve(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        Ok(())
    })
}

struct Client {
    base: String,
    session: String,
    agent: ureq::Agent,
}

impl Client {
    fn new(config: &ServiceConfig, target: &SessionTarget) -> Result<Self, CliError> {
        let base = target
            .server
            .clone()
            .unwrap_or_else(|| format!("http://{}", config.listen));
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(300)))
            .build()
            .into();
        Ok(Self {
            base: base.trim_end_matches('/').to_string(),
            session: target.session.clone(),
            agent,
        })
    }

    fn post(&self, path: &str, body: Value) -> Result<Value, CliError> {
        let url = format!("{}{path}", self.base);
        let mut response = self
            .agent
            .post(&url)
            .send_json(&body)
            .map_err(|e| CliError::Server(format!("cannot reach {url}: {e}")))?;
        let value: Value = response
            .body_mut()
            .read_json()
            .map_err(|e| CliError::Server(format!("bad response from {url}: {e}")))?;
        if value["kind"] == "error" {
            return Err(CliError::Server(format!(
                "{}: {}",
                value["error_code"].as_str().unwrap_or("error"),
                value["message"].as_str().unwrap_or("")
            )));
        }
        Ok(value)
    }

    fn session_id(&self) -> Result<String, CliError> {
        if self.session != "new" {
            return Ok(self.session.clone());
        }
        let created = self.post("/v1/sessions", json!({}))?;
        created["session_id"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| CliError::Server("server did not return a session id".into()))
    }
}
