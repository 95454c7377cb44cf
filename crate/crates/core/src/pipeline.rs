//! Online query path: embed → exact top-k → rerank → grounded generation.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CorpusStore;
use crate::embed::{EmbedError, EmbedRole, Embedder};
use crate::generate::{assemble_prompt, fitting_passages, ContextPassage, GenerateError, GenerationConfig, Generator};
use crate::index::{IndexError, RankedHit, TieredIndexSet};
use crate::lexical::{Bm25Index, Bm25Params, LexicalError};
use crate::rerank::{first_stage_order, rerank, Candidate, RerankError, Reranker};

pub const DEFAULT_K_RETRIEVE: usize = 20;
pub const DEFAULT_ALTERNATIVES: usize = 3;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Rerank(#[from] RerankError),
    #[error(transparent)]
    Generate(#[from] GenerateError),
    #[error(transparent)]
    Lexical(#[from] LexicalError),
    #[error("unknown analysis `{0}`")]
    UnknownAnalysis(String),
    #[error("corpus has no analyses")]
    EmptyCorpus,
    #[error("invalid pipeline configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub k_retrieve: usize,
    pub k_final: usize,
    /// Extra abstract matches carried alongside the confirmation candidate.
    pub alternatives: usize,
    pub fallback_to_first_stage: bool,
    pub bm25: Bm25Params,
    pub generation: GenerationConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k_retrieve: DEFAULT_K_RETRIEVE,
            k_final: crate::rerank::DEFAULT_K_FINAL,
            alternatives: DEFAULT_ALTERNATIVES,
            fallback_to_first_stage: false,
            bm25: Bm25Params::default(),
            generation: GenerationConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.k_final == 0 || self.k_retrieve == 0 {
            return Err(PipelineError::InvalidConfig("k values must be >= 1".into()));
        }
        if self.k_final > self.k_retrieve {
            return Err(PipelineError::InvalidConfig(format!(
                "k_final ({}) exceeds k_retrieve ({})",
                self.k_final, self.k_retrieve
            )));
        }
        self.bm25.validate()?;
        self.generation.validate()?;
        Ok(())
    }
}

#[derive(Clone)]
pub struct Models {
    pub embedder: Arc<dyn Embedder>,
    pub reranker: Arc<dyn Reranker>,
    pub generator: Arc<dyn Generator>,
}

/// Top abstract match for a first query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisMatch {
    pub analysis_id: String,
    pub title: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub candidate: AnalysisMatch,
    pub alternatives: Vec<AnalysisMatch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    pub citations: Vec<ContextPassage>,
}

/// Immutable bundle of corpus, indexes and model clients.
pub struct Engine {
    store: CorpusStore,
    indexes: TieredIndexSet,
    lexical: BTreeMap<String, Bm25Index>,
    models: Models,
    config: PipelineConfig,
}

impl Engine {
    pub fn new(
        store: CorpusStore,
        indexes: TieredIndexSet,
        models: Models,
        config: PipelineConfig,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        if indexes.dimension() != models.embedder.dimension() {
            return Err(IndexError::DimensionMismatch {
                expected: indexes.dimension(),
                got: models.embedder.dimension(),
            }
            .into());
        }
        for a in store.analyses() {
            indexes.fulltext(&a.analysis_id)?;
        }
        let mut lexical = BTreeMap::new();
        for id in indexes.analysis_ids() {
            if store.analysis(id).is_none() {
                return Err(PipelineError::UnknownAnalysis(id.to_string()));
            }
            let chunks = store.chunks_of_analysis(id);
            let bm25 = Bm25Index::build(
                chunks
                    .iter()
                    .map(|c| (c.chunk_id.as_str(), c.analysis_id.as_str(), c.text.as_str())),
                config.bm25,
            )?;
            lexical.insert(id.to_string(), bm25);
        }
        Ok(Self {
            store,
            indexes,
            lexical,
            models,
            config,
        })
    }

    pub fn store(&self) -> &CorpusStore {
        &self.store
    }

    pub fn indexes(&self) -> &TieredIndexSet {
        &self.indexes
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn models(&self) -> &Models {
        &self.models
    }

    pub fn lexical(&self, analysis_id: &str) -> Result<&Bm25Index, PipelineError> {
        self.lexical
            .get(analysis_id)
            .ok_or_else(|| PipelineError::UnknownAnalysis(analysis_id.to_string()))
    }

    /// Searches the abstracts tier for the single best analysis.
    pub fn propose(&self, query: &str) -> Result<Proposal, PipelineError> {
        let abstracts = self.indexes.abstracts();
        if abstracts.is_empty() {
            return Err(PipelineError::EmptyCorpus);
        }
        let q = self.models.embedder.embed_one(query, EmbedRole::Query)?;
        let hits = abstracts.search_topk(&q, 1 + self.config.alternatives)?;
        let mut matches = hits.into_iter().map(|h| {
            let title = self
                .store
                .analysis(&h.analysis_id)
                .map(|a| a.title.clone())
                .unwrap_or_default();
            AnalysisMatch {
                analysis_id: h.analysis_id,
                title,
                score: h.score,
            }
        });
        let candidate = matches.next().ok_or(PipelineError::EmptyCorpus)?;
        Ok(Proposal {
            candidate,
            alternatives: matches.collect(),
        })
    }

    /// Dense first stage over one analysis' full-text tier.
    pub fn retrieve(&self, analysis_id: &str, query: &str) -> Result<Vec<Candidate>, PipelineError> {
        let index = self.indexes.fulltext(analysis_id)?;
        if index.is_empty() {
            return Ok(Vec::new());
        }
        let q = self.models.embedder.embed_one(query, EmbedRole::Query)?;
        let hits = index.search_topk(&q, self.config.k_retrieve)?;
        Ok(hits
            .into_iter()
            .map(|h| Candidate {
                text: self.chunk_text(&h.chunk_id),
                chunk_id: h.chunk_id,
                analysis_id: h.analysis_id,
                first_stage_score: h.score,
            })
            .collect())
    }

    fn chunk_text(&self, chunk_id: &str) -> String {
        self.store.chunk(chunk_id).map(|c| c.text.clone()).unwrap_or_default()
    }

    /// Dense retrieval followed by reranking down to `k_final`.
    pub fn retrieve_and_rerank(&self, analysis_id: &str, query: &str) -> Result<Vec<ContextPassage>, PipelineError> {
        let candidates = self.retrieve(analysis_id, query)?;
        if candidates.is_empty() {
            return Ok(Vec::new());
        }
        debug_assert!(candidates.len() <= self.config.k_retrieve);
        let hits = match rerank(self.models.reranker.as_ref(), query, &candidates, self.config.k_final) {
            Ok(h) => h,
            Err(e) if self.config.fallback_to_first_stage => {
                tracing::warn!(error = %e, "reranker failed, using first-stage order");
                first_stage_order(&candidates, self.config.k_final)
            }
            Err(e) => return Err(e.into()),
        };
        Ok(hits
            .into_iter()
            .map(|hit| ContextPassage {
                text: self.chunk_text(&hit.chunk_id),
                hit,
            })
            .collect())
    }

    /// Keyword baseline over the same chunk set.
    pub fn bm25_rank(&self, analysis_id: &str, query: &str, k: usize) -> Result<Vec<RankedHit>, PipelineError> {
        Ok(self.lexical(analysis_id)?.rank(query, k))
    }

    /// Full answer for a query locked onto one analysis.
    pub fn answer(&self, analysis_id: &str, query: &str) -> Result<Answer, PipelineError> {
        let mut citations = self.retrieve_and_rerank(analysis_id, query)?;
        citations.truncate(fitting_passages(&citations, self.config.generation.max_context_chars));
        let prompt = assemble_prompt(query, &citations, &self.config.generation);
        let text = self.models.generator.generate(&prompt)?;
        Ok(Answer { text, citations })
    }
}
