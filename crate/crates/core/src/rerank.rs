//! Second-stage reranking of first-stage candidates.
//!
//! The reranker score replaces the retrieval score outright. It is only ever
//! applied to the bounded candidate list coming out of dense retrieval.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::embed::{ModelMode, SynonymTable};
use crate::index::RankedHit;
use crate::transport::{Transport, TransportError};

pub const DEFAULT_K_FINAL: usize = 5;

#[derive(Debug, Error)]
pub enum RerankError {
    #[error("no candidates to rerank")]
    EmptyCandidates,
    #[error("k_final must be at least 1")]
    InvalidK,
    #[error("reranker unavailable: {0}")]
    Unavailable(#[from] TransportError),
    #[error("reranker returned {got} scores for {expected} passages")]
    CountMismatch { expected: usize, got: usize },
    #[error("malformed reranker response: {0}")]
    Malformed(String),
    #[error("invalid reranker configuration: {0}")]
    InvalidConfig(String),
}

/// A first-stage hit with its passage text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub chunk_id: String,
    pub analysis_id: String,
    pub text: String,
    pub first_stage_score: f64,
}

pub trait Reranker: Send + Sync {
    /// One relevance score per candidate, in input order.
    fn score(&self, query: &str, candidates: &[Candidate]) -> Result<Vec<f64>, RerankError>;
}

fn ranked(mut scored: Vec<(f64, &Candidate)>, k_final: usize) -> Vec<RankedHit> {
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.chunk_id.cmp(&b.1.chunk_id)));
    scored
        .into_iter()
        .take(k_final)
        .enumerate()
        .map(|(i, (score, c))| RankedHit {
            chunk_id: c.chunk_id.clone(),
            analysis_id: c.analysis_id.clone(),
            score,
            rank: i + 1,
        })
        .collect()
}

/// Scores every candidate jointly with the query and keeps the best `k_final`.
pub fn rerank(
    reranker: &dyn Reranker,
    query: &str,
    candidates: &[Candidate],
    k_final: usize,
) -> Result<Vec<RankedHit>, RerankError> {
    if candidates.is_empty() {
        return Err(RerankError::EmptyCandidates);
    }
    if k_final == 0 {
        return Err(RerankError::InvalidK);
    }
    let scores = reranker.score(query, candidates)?;
    if scores.len() != candidates.len() {
        return Err(RerankError::CountMismatch {
            expected: candidates.len(),
            got: scores.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(RerankError::Malformed("non-finite score".into()));
    }
    Ok(ranked(scores.into_iter().zip(candidates).collect(), k_final))
}

/// First-stage order truncated to `k_final`; used when the reranker is down
/// and fallback is enabled.
pub fn first_stage_order(candidates: &[Candidate], k_final: usize) -> Vec<RankedHit> {
    ranked(candidates.iter().map(|c| (c.first_stage_score, c)).collect(), k_final)
}

/// Jaccard overlap of canonical token sets.
pub fn stub_score(query: &str, passage: &str, synonyms: &SynonymTable) -> f64 {
    let q: BTreeSet<String> = synonyms.canonical_tokens(query).into_iter().collect();
    let p: BTreeSet<String> = synonyms.canonical_tokens(passage).into_iter().collect();
    let union = q.union(&p).count();
    if union == 0 {
        return 0.0;
    }
    q.intersection(&p).count() as f64 / union as f64
}

#[derive(Debug, Clone, Default)]
pub struct StubReranker {
    synonyms: Arc<SynonymTable>,
}

impl StubReranker {
    pub fn new(synonyms: Arc<SynonymTable>) -> Self {
        Self { synonyms }
    }
}

impl Reranker for StubReranker {
    fn score(&self, query: &str, candidates: &[Candidate]) -> Result<Vec<f64>, RerankError> {
        Ok(candidates
            .iter()
            .map(|c| stub_score(query, &c.text, &self.synonyms))
            .collect())
    }
}

/// Client for a cross-encoder server speaking
/// `{"query", "passages": [{"id", "text"}]}` → `{"scores": [...]}`.
pub struct RemoteReranker {
    endpoint_url: String,
    timeout: Duration,
    transport: Arc<dyn Transport>,
}

impl RemoteReranker {
    pub fn new(endpoint_url: impl Into<String>, timeout: Duration, transport: Arc<dyn Transport>) -> Self {
        Self {
            endpoint_url: endpoint_url.into(),
            timeout,
            transport,
        }
    }
}

impl Reranker for RemoteReranker {
    fn score(&self, query: &str, candidates: &[Candidate]) -> Result<Vec<f64>, RerankError> {
        let passages: Vec<_> = candidates
            .iter()
            .map(|c| json!({ "id": c.chunk_id, "text": c.text }))
            .collect();
        let body = json!({ "query": query, "passages": passages });
        let response = self.transport.post_json(&self.endpoint_url, &body, self.timeout)?;
        let scores = response
            .get("scores")
            .cloned()
            .ok_or_else(|| RerankError::Malformed("missing `scores`".into()))?;
        serde_json::from_value(scores).map_err(|e| RerankError::Malformed(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RerankerConfig {
    pub mode: ModelMode,
    pub endpoint_url: Option<String>,
    pub timeout_s: u64,
    pub k_final: usize,
    /// On reranker failure, return the first-stage order instead of an error.
    pub fallback_to_first_stage: bool,
    /// Synonym table for the stub; falls back to the embedder's table when unset.
    pub synonym_table_path: Option<PathBuf>,
}

impl Default for RerankerConfig {
    fn default() -> Self {
        Self {
            mode: ModelMode::Stub,
            endpoint_url: None,
            timeout_s: 30,
            k_final: DEFAULT_K_FINAL,
            fallback_to_first_stage: false,
            synonym_table_path: None,
        }
    }
}

impl RerankerConfig {
    pub fn validate(&self) -> Result<(), RerankError> {
        if self.k_final == 0 {
            return Err(RerankError::InvalidConfig("k_final must be >= 1".into()));
        }
        if self.mode == ModelMode::Remote && self.endpoint_url.is_none() {
            return Err(RerankError::InvalidConfig("remote mode requires endpoint_url".into()));
        }
        Ok(())
    }

    pub fn build(
        &self,
        transport: Arc<dyn Transport>,
        synonyms: Arc<SynonymTable>,
    ) -> Result<Arc<dyn Reranker>, RerankError> {
        self.validate()?;
        Ok(match self.mode {
            ModelMode::Stub => Arc::new(StubReranker::new(synonyms)),
            ModelMode::Remote => Arc::new(RemoteReranker::new(
                self.endpoint_url.clone().unwrap_or_default(),
                Duration::from_secs(self.timeout_s),
                transport,
            )),
        })
    }
}
