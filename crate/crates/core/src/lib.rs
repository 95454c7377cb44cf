//! Retrieval-augmented question answering over internal analysis documentation.
//!
//! The crate holds the whole retrieval pipeline: corpus ingestion and
//! chunking, embedding, exact vector search, BM25, reranking, grounded
//! generation, the per-user conversation state machine and the evaluation
//! harness. Model servers are reached only through [`transport::Transport`].

pub mod config;
pub mod corpus;
pub mod embed;
pub mod evalkit;
pub mod fixtures;
pub mod generate;
pub mod index;
pub mod lexical;
pub mod pipeline;
pub mod rerank;
pub mod session;
pub mod transport;

pub use config::{ConfigError, ServiceConfig};
pub use corpus::{AnalysisRecord, Chunk, CorpusError, CorpusStore, Document, IngestRecord};
pub use embed::{EmbedRole, Embedder, EmbeddingVector, ModelMode, StubEmbedder, SynonymTable};
pub use evalkit::{GoldQuery, MetricValues, MetricsReport, SetLabel, System};
pub use generate::{ContextPassage, Generator, StubGenerator};
pub use index::{RankedHit, TieredIndexSet, VectorIndex};
pub use lexical::Bm25Index;
pub use pipeline::{Answer, Engine, Models, PipelineConfig, PipelineError};
pub use rerank::{Candidate, Reranker, StubReranker};
pub use session::{QueryOutcome, Session, SessionError, SessionManager, SessionState};
pub use transport::{Transport, TransportError};
