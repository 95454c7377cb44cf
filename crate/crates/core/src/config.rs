//! Service configuration file (TOML).

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{load_corpus, CorpusError};
use crate::embed::{EmbedError, EmbedderConfig, ModelMode};
use crate::generate::{GenerateError, GenerationConfig};
use crate::index::{IndexError, TieredIndexSet};
use crate::pipeline::{Engine, Models, PipelineConfig, PipelineError, DEFAULT_ALTERNATIVES, DEFAULT_K_RETRIEVE};
use crate::rerank::{RerankError, RerankerConfig, DEFAULT_K_FINAL};
use crate::transport::{
    endpoint_authority, AllowListTransport, HttpTransport, Transport, TransportError, DEFAULT_MAX_IN_FLIGHT,
};

pub const DEFAULT_LISTEN: &str = "127.0.0.1:8080";
pub const DEFAULT_IDLE_EXPIRY_S: u64 = 24 * 60 * 60;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("endpoint {0} is not in allowed_endpoints")]
    EndpointNotAllowed(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Rerank(#[from] RerankError),
    #[error(transparent)]
    Generate(#[from] GenerateError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: String,
    pub corpus_path: PathBuf,
    pub index_dir: PathBuf,
    pub k_retrieve: usize,
    pub k_final: usize,
    pub alternatives: usize,
    pub session_idle_expiry_s: u64,
    pub max_in_flight: usize,
    /// Every model endpoint must appear here; anything else is refused.
    pub allowed_endpoints: Vec<String>,
    pub embedder: EmbedderConfig,
    pub reranker: RerankerConfig,
    pub generator: GenerationConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: DEFAULT_LISTEN.into(),
            corpus_path: PathBuf::from("corpus.jsonl"),
            index_dir: PathBuf::from("index"),
            k_retrieve: DEFAULT_K_RETRIEVE,
            k_final: DEFAULT_K_FINAL,
            alternatives: DEFAULT_ALTERNATIVES,
            session_idle_expiry_s: DEFAULT_IDLE_EXPIRY_S,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            allowed_endpoints: Vec::new(),
            embedder: EmbedderConfig::default(),
            reranker: RerankerConfig::default(),
            generator: GenerationConfig::default(),
        }
    }
}

impl ServiceConfig {
    /// Reads and validates a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml_str(&text, base)
    }

    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut config: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.resolve_paths(base_dir);
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn resolve_paths(&mut self, base_dir: &Path) {
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        resolve(&mut self.corpus_path);
        resolve(&mut self.index_dir);
        if let Some(p) = self.embedder.synonym_table_path.as_mut() {
            resolve(p);
        }
        if let Some(p) = self.reranker.synonym_table_path.as_mut() {
            resolve(p);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_in_flight == 0 {
            return Err(ConfigError::Invalid("max_in_flight must be >= 1".into()));
        }
        if self.session_idle_expiry_s == 0 {
            return Err(ConfigError::Invalid("session_idle_expiry_s must be >= 1".into()));
        }
        self.pipeline_config().validate()?;
        self.embedder.validate()?;
        self.reranker.validate()?;
        let allowed = self
            .allowed_endpoints
            .iter()
            .map(|u| endpoint_authority(u))
            .collect::<Result<std::collections::BTreeSet<_>, _>>()?;
        for url in self.remote_endpoints() {
            if !allowed.contains(&endpoint_authority(url)?) {
                return Err(ConfigError::EndpointNotAllowed(url.to_string()));
            }
        }
        Ok(())
    }

    /// Endpoint URLs of every component configured in remote mode.
    pub fn remote_endpoints(&self) -> Vec<&str> {
        let mut out = Vec::new();
        if self.embedder.mode == ModelMode::Remote {
            out.extend(self.embedder.endpoint_url.as_deref());
        }
        if self.reranker.mode == ModelMode::Remote {
            out.extend(self.reranker.endpoint_url.as_deref());
        }
        if self.generator.mode == ModelMode::Remote {
            out.extend(self.generator.endpoint_url.as_deref());
        }
        out
    }

    /// Switches every model component to its deterministic stub.
    pub fn use_stub_models(&mut self) {
        self.embedder.mode = ModelMode::Stub;
        self.reranker.mode = ModelMode::Stub;
        self.generator.mode = ModelMode::Stub;
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            k_retrieve: self.k_retrieve,
            k_final: self.k_final,
            alternatives: self.alternatives,
            fallback_to_first_stage: self.reranker.fallback_to_first_stage,
            bm25: Default::default(),
            generation: self.generator.clone(),
        }
    }

    pub fn idle_expiry(&self) -> chrono::Duration {
        chrono::Duration::seconds(self.session_idle_expiry_s as i64)
    }

    /// HTTP transport restricted to `allowed_endpoints`.
    pub fn transport(&self) -> Result<Arc<dyn Transport>, ConfigError> {
        Ok(Arc::new(AllowListTransport::new(
            HttpTransport::new(self.max_in_flight),
            &self.allowed_endpoints,
        )?))
    }

    pub fn build_models(&self, transport: Arc<dyn Transport>) -> Result<Models, ConfigError> {
        let embedder = self.embedder.build(transport.clone())?;
        let rerank_synonyms = match &self.reranker.synonym_table_path {
            Some(p) => Arc::new(crate::embed::SynonymTable::load(p)?),
            None => self.embedder.load_synonyms()?,
        };
        let reranker = self.reranker.build(transport.clone(), rerank_synonyms)?;
        let generator = self.generator.build(transport)?;
        Ok(Models {
            embedder,
            reranker,
            generator,
        })
    }

    /// Loads the stored corpus and indexes and wires them to the configured models.
    pub fn open_engine(&self, transport: Arc<dyn Transport>) -> Result<Engine, ConfigError> {
        let store = load_corpus(&self.corpus_path)?;
        let indexes = TieredIndexSet::load(&self.index_dir)?;
        let models = self.build_models(transport)?;
        Ok(Engine::new(store, indexes, models, self.pipeline_config())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = ServiceConfig::default();
        let back = ServiceConfig::from_toml_str(&c.to_toml_string(), Path::new("")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.k_retrieve, 20);
        assert_eq!(back.k_final, 5);
        assert_eq!(back.session_idle_expiry_s, 86_400);
    }

    #[test]
    fn relative_paths_follow_config_dir() {
        let c = ServiceConfig::from_toml_str(
            "corpus_path = \"c.jsonl\"\nindex_dir = \"/abs/idx\"\n[embedder]\nsynonym_table_path = \"syn.tsv\"\n",
            Path::new("/etc/mitra"),
        )
        .unwrap();
        assert_eq!(c.corpus_path, PathBuf::from("/etc/mitra/c.jsonl"));
        assert_eq!(c.index_dir, PathBuf::from("/abs/idx"));
        assert_eq!(c.embedder.synonym_table_path, Some(PathBuf::from("/etc/mitra/syn.tsv")));
    }

    #[test]
    fn k_final_above_k_retrieve_rejected() {
        let err = ServiceConfig::from_toml_str("k_retrieve = 3\nk_final = 5\n", Path::new("")).unwrap_err();
        assert!(err.to_string().contains("k_final"), "{err}");
    }

    #[test]
    fn remote_endpoint_must_be_allowed() {
        let text = "[generator]\nmode = \"remote\"\nendpoint_url = \"http://10.0.0.5:11434/api/generate\"\n";
        assert!(matches!(
            ServiceConfig::from_toml_str(text, Path::new("")),
            Err(ConfigError::EndpointNotAllowed(_))
        ));
        let allowed = format!("allowed_endpoints = [\"http://10.0.0.5:11434\"]\n{text}");
        ServiceConfig::from_toml_str(&allowed, Path::new("")).unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ServiceConfig::from_toml_str("k_retreive = 3\n", Path::new("")).is_err());
    }
}
