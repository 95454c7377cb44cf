//! Conversation state machine for two-tier retrieval.
//!
//! ```text
//!   Fresh --first query--> CandidateProposed --accept--> Locked
//!     ^                          |                         |
//!     +---------reject-----------+                         |
//!     +------------------------reset (from any)------------+
//! ```
//!
//! Full-text retrieval only ever happens in `Locked`, against the one
//! analysis the user confirmed.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generate::ContextPassage;
use crate::pipeline::{AnalysisMatch, Engine, PipelineError};

pub const ABSTRACT_EXCERPT_CHARS: usize = 300;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("query text is empty")]
    EmptyQuery,
    #[error("the proposed analysis must be confirmed or rejected first")]
    QueryBeforeConfirmation,
    #[error("session is not awaiting a confirmation")]
    NotAwaitingConfirmation,
    #[error("corpus has no analyses")]
    EmptyCorpus,
    #[error("session `{0}` not found")]
    NotFound(String),
    #[error(transparent)]
    Pipeline(PipelineError),
}

impl From<PipelineError> for SessionError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::EmptyCorpus => SessionError::EmptyCorpus,
            other => SessionError::Pipeline(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum SessionState {
    Fresh,
    CandidateProposed { analysis_id: String, abstract_score: f64 },
    Locked { analysis_id: String },
}

impl SessionState {
    pub fn name(&self) -> &'static str {
        match self {
            SessionState::Fresh => "fresh",
            SessionState::CandidateProposed { .. } => "candidate_proposed",
            SessionState::Locked { .. } => "locked",
        }
    }

    pub fn analysis_id(&self) -> Option<&str> {
        match self {
            SessionState::Fresh => None,
            SessionState::CandidateProposed { analysis_id, .. } | SessionState::Locked { analysis_id } => {
                Some(analysis_id)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QueryOutcome {
    ConfirmationRequest {
        analysis_id: String,
        title: String,
        abstract_excerpt: String,
        score: f64,
        alternatives: Vec<AnalysisMatch>,
    },
    Answer {
        analysis_id: String,
        text: String,
        citations: Vec<ContextPassage>,
    },
    Rejected {
        message: String,
    },
}

fn excerpt(text: &str, max_chars: usize) -> String {
    text.chars().take(max_chars).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    #[serde(flatten)]
    pub state: SessionState,
    pub created_at: DateTime<Utc>,
    pub last_active: DateTime<Utc>,
}

impl Session {
    pub fn new() -> Self {
        Self::with_id(uuid::Uuid::new_v4().to_string(), Utc::now())
    }

    pub fn with_id(session_id: String, now: DateTime<Utc>) -> Self {
        Self {
            session_id,
            state: SessionState::Fresh,
            created_at: now,
            last_active: now,
        }
    }

    fn touch(&mut self) {
        self.last_active = self.last_active.max(Utc::now());
    }

    pub fn handle_query(&mut self, query: &str, engine: &Engine) -> Result<QueryOutcome, SessionError> {
        if query.trim().is_empty() {
            return Err(SessionError::EmptyQuery);
        }
        let outcome = match &self.state {
            SessionState::Fresh => {
                let proposal = engine.propose(query)?;
                let candidate = proposal.candidate;
                let abstract_excerpt = engine
                    .store()
                    .analysis(&candidate.analysis_id)
                    .map(|a| excerpt(&a.abstract_text, ABSTRACT_EXCERPT_CHARS))
                    .unwrap_or_default();
                self.state = SessionState::CandidateProposed {
                    analysis_id: candidate.analysis_id.clone(),
                    abstract_score: candidate.score,
                };
                QueryOutcome::ConfirmationRequest {
                    analysis_id: candidate.analysis_id,
                    title: candidate.title,
                    abstract_excerpt,
                    score: candidate.score,
                    alternatives: proposal.alternatives,
                }
            }
            SessionState::CandidateProposed { .. } => return Err(SessionError::QueryBeforeConfirmation),
            SessionState::Locked { analysis_id } => {
                let answer = engine.answer(analysis_id, query)?;
                QueryOutcome::Answer {
                    analysis_id: analysis_id.clone(),
                    text: answer.text,
                    citations: answer.citations,
                }
            }
        };
        self.touch();
        Ok(outcome)
    }

    pub fn confirm(&mut self, accept: bool) -> Result<&SessionState, SessionError> {
        let SessionState::CandidateProposed { analysis_id, .. } = &self.state else {
            return Err(SessionError::NotAwaitingConfirmation);
        };
        self.state = if accept {
            SessionState::Locked {
                analysis_id: analysis_id.clone(),
            }
        } else {
            SessionState::Fresh
        };
        self.touch();
        Ok(&self.state)
    }

    pub fn reset(&mut self) -> &SessionState {
        self.state = SessionState::Fresh;
        self.touch();
        &self.state
    }
}

impl Default for Session {
    fn default() -> Self {
        Self::new()
    }
}

pub type SessionHandle = Arc<Mutex<Session>>;

/// Concurrent session table. Each session sits behind its own mutex, so
/// operations on one session are serialized while distinct sessions proceed
/// in parallel.
#[derive(Debug)]
pub struct SessionManager {
    sessions: RwLock<HashMap<String, SessionHandle>>,
    idle_expiry: Duration,
}

impl SessionManager {
    pub fn new(idle_expiry: Duration) -> Self {
        Self {
            sessions: RwLock::new(HashMap::new()),
            idle_expiry,
        }
    }

    pub fn create(&self) -> SessionHandle {
        let session = Session::new();
        let id = session.session_id.clone();
        let handle = Arc::new(Mutex::new(session));
        self.sessions
            .write()
            .expect("session table poisoned")
            .insert(id, handle.clone());
        handle
    }

    pub fn get(&self, session_id: &str) -> Result<SessionHandle, SessionError> {
        self.sessions
            .read()
            .expect("session table poisoned")
            .get(session_id)
            .cloned()
            .ok_or_else(|| SessionError::NotFound(session_id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.sessions.read().expect("session table poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops sessions idle for longer than the expiry. Sessions currently
    /// locked by an in-flight operation are kept.
    pub fn evict_idle(&self, now: DateTime<Utc>) -> usize {
        let mut table = self.sessions.write().expect("session table poisoned");
        let before = table.len();
        table.retain(|_, handle| match handle.try_lock() {
            Ok(s) => now - s.last_active <= self.idle_expiry,
            Err(_) => true,
        });
        before - table.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{AnalysisRecord, CorpusStore, Document};
    use crate::embed::{StubEmbedder, SynonymTable};
    use crate::generate::StubGenerator;
    use crate::index::TieredIndexSet;
    use crate::pipeline::{Models, PipelineConfig};
    use crate::rerank::StubReranker;

    fn engine_with(analyses: &[(&str, &str)]) -> Engine {
        let mut table = SynonymTable::new();
        table.insert("dark matter", "dm");
        table.insert("weakly interacting particle", "dm");
        let table = Arc::new(table);
        let mut store = CorpusStore::new();
        for (id, abs) in analyses {
            store
                .upsert_analysis(AnalysisRecord {
                    analysis_id: id.to_string(),
                    title: format!("Title {id}"),
                    abstract_text: abs.to_string(),
                })
                .unwrap();
            store
                .ingest_document(Document {
                    doc_id: format!("{id}-an"),
                    analysis_id: id.to_string(),
                    body_text: format!("First paragraph about {abs}.\n\nSecond paragraph on systematics of {id}."),
                    version: 1,
                })
                .unwrap();
        }
        let embedder = Arc::new(StubEmbedder::new(128, 5, table.clone()));
        let indexes = TieredIndexSet::build(&store, embedder.as_ref()).unwrap();
        Engine::new(
            store,
            indexes,
            Models {
                embedder,
                reranker: Arc::new(StubReranker::new(table)),
                generator: Arc::new(StubGenerator),
            },
            PipelineConfig::default(),
        )
        .unwrap()
    }

    fn fixture() -> Engine {
        engine_with(&[
            ("A", "search for dm produced with a jet"),
            ("B", "measurement of the higgs boson decay to muons"),
            ("C", "top quark pair production cross section"),
        ])
    }

    #[test]
    fn lifecycle() {
        let e = fixture();
        let mut s = Session::new();
        assert_eq!(s.state, SessionState::Fresh);
        assert!(s.created_at <= s.last_active);

        let out = s.handle_query("weakly interacting particle with a jet", &e).unwrap();
        match out {
            QueryOutcome::ConfirmationRequest { analysis_id, title, .. } => {
                assert_eq!(analysis_id, "A");
                assert_eq!(title, "Title A");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            s.handle_query("anything", &e),
            Err(SessionError::QueryBeforeConfirmation)
        ));
        assert_eq!(
            s.confirm(true).unwrap(),
            &SessionState::Locked {
                analysis_id: "A".into()
            }
        );

        match s.handle_query("systematics", &e).unwrap() {
            QueryOutcome::Answer { citations, text, .. } => {
                assert!(!citations.is_empty());
                assert!(citations.iter().all(|c| c.hit.analysis_id == "A"));
                assert!(text.contains(&citations[0].hit.chunk_id));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(s.created_at <= s.last_active);
    }

    #[test]
    fn reject_returns_to_fresh() {
        let e = fixture();
        let mut s = Session::new();
        s.handle_query("higgs to muons", &e).unwrap();
        assert_eq!(s.confirm(false).unwrap(), &SessionState::Fresh);
        assert!(matches!(s.confirm(true), Err(SessionError::NotAwaitingConfirmation)));
    }

    #[test]
    fn reset_from_any_state() {
        let e = fixture();
        let mut s = Session::new();
        assert_eq!(s.reset(), &SessionState::Fresh);
        s.handle_query("top pair cross section", &e).unwrap();
        s.confirm(true).unwrap();
        assert_eq!(s.reset(), &SessionState::Fresh);
        match s.handle_query("higgs boson muons", &e).unwrap() {
            QueryOutcome::ConfirmationRequest { analysis_id, .. } => assert_eq!(analysis_id, "B"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_query_rejected_without_state_change() {
        let e = fixture();
        let mut s = Session::new();
        let before = s.clone();
        assert!(matches!(s.handle_query("  ", &e), Err(SessionError::EmptyQuery)));
        assert_eq!(s, before);
    }

    #[test]
    fn distinct_ids() {
        assert_ne!(Session::new().session_id, Session::new().session_id);
    }

    #[test]
    fn excerpt_is_bounded() {
        let long = "x".repeat(1000);
        let e = engine_with(&[("L", &long)]);
        let mut s = Session::new();
        match s.handle_query("x", &e).unwrap() {
            QueryOutcome::ConfirmationRequest { abstract_excerpt, .. } => {
                assert_eq!(abstract_excerpt.chars().count(), ABSTRACT_EXCERPT_CHARS)
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn manager_create_get_evict() {
        let m = SessionManager::new(Duration::hours(24));
        let h = m.create();
        let id = h.lock().unwrap().session_id.clone();
        assert!(m.get(&id).is_ok());
        assert!(matches!(m.get("nope"), Err(SessionError::NotFound(_))));
        assert_eq!(m.evict_idle(Utc::now()), 0);
        assert_eq!(m.evict_idle(Utc::now() + Duration::hours(25)), 1);
        assert!(m.is_empty());
    }

    #[test]
    fn state_wire_shape() {
        let s = Session::with_id("s1".into(), Utc::now());
        let v = serde_json::to_value(&s).unwrap();
        assert_eq!(v["state"], "fresh");
        let locked = SessionState::Locked {
            analysis_id: "A".into(),
        };
        assert_eq!(
            serde_json::to_value(&locked).unwrap(),
            serde_json::json!({"state": "locked", "analysis_id": "A"})
        );
    }
}
