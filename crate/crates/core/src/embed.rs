//! Embedding boundary: unit-normalized dense vectors for chunks and queries.
//!
//! Two implementations sit behind [`Embedder`]. [`RemoteEmbedder`] talks to an
//! on-premise embedding server. [`StubEmbedder`] is a deterministic
//! bag-of-words stand-in: each canonical token maps to a pseudo-random unit
//! vector seeded from the token and the stub seed, and a text embeds as the
//! normalized sum. A synonym table folds paraphrases onto one canonical token,
//! which is enough to emulate how a dense model matches "transverse momentum"
//! to "pt" while a keyword matcher does not.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::lexical::tokenize;
use crate::transport::{Transport, TransportError};

pub const DEFAULT_DIMENSION: usize = 768;
pub const DEFAULT_MAX_BATCH: usize = 32;

/// Token used when a non-empty text contains no alphanumeric token at all.
const EMPTY_TOKEN: &str = "\u{0}empty";

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("text #{0} is empty")]
    EmptyText(usize),
    #[error("embedder unavailable: {0}")]
    Unavailable(#[from] TransportError),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedding server returned {got} vectors for {expected} texts")]
    CountMismatch { expected: usize, got: usize },
    #[error("malformed embedding response: {0}")]
    Malformed(String),
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("vector has non-finite components")]
    NonFinite,
    #[error("synonym table {path}: {message}")]
    SynonymTable { path: String, message: String },
    #[error("invalid embedder configuration: {0}")]
    InvalidConfig(String),
}

/// A unit-length vector in the retrieval space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Scales `raw` to unit Euclidean norm.
pub fn normalize(raw: Vec<f64>) -> Result<EmbeddingVector, EmbedError> {
    if raw.iter().any(|x| !x.is_finite()) {
        return Err(EmbedError::NonFinite);
    }
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(EmbedError::ZeroVector);
    }
    Ok(EmbeddingVector(raw.into_iter().map(|x| x / norm).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedRole {
    Query,
    Passage,
}

pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;

    fn embed_texts(&self, texts: &[&str], role: EmbedRole) -> Result<Vec<EmbeddingVector>, EmbedError>;

    fn embed_one(&self, text: &str, role: EmbedRole) -> Result<EmbeddingVector, EmbedError> {
        let mut out = self.embed_texts(&[text], role)?;
        out.pop().ok_or(EmbedError::CountMismatch { expected: 1, got: 0 })
    }
}

fn check_non_empty(texts: &[&str]) -> Result<(), EmbedError> {
    match texts.iter().position(|t| t.is_empty()) {
        Some(i) => Err(EmbedError::EmptyText(i)),
        None => Ok(()),
    }
}

/// Maps multi-word surface forms onto canonical token sequences.
///
/// Matching is greedy longest-first over the tokenized text.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SynonymTable {
    entries: HashMap<Vec<String>, Vec<String>>,
    max_surface_len: usize,
}

impl SynonymTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, surface: &str, canonical: &str) {
        let surface = tokenize(surface);
        let canonical = tokenize(canonical);
        if surface.is_empty() || canonical.is_empty() {
            return;
        }
        self.max_surface_len = self.max_surface_len.max(surface.len());
        self.entries.insert(surface, canonical);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parses two tab-separated columns: surface form, canonical form.
    /// Blank lines and lines starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut table = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 2 || cols[0].trim().is_empty() || cols[1].trim().is_empty() {
                return Err(format!("line {}: expected `surface<TAB>canonical`", i + 1));
            }
            table.insert(cols[0], cols[1]);
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self, EmbedError> {
        let err = |message: String| EmbedError::SynonymTable {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        Self::parse(&text).map_err(err)
    }

    pub fn canonicalize(&self, tokens: &[String]) -> Vec<String> {
        if self.entries.is_empty() {
            return tokens.to_vec();
        }
        let mut out = Vec::with_capacity(tokens.len());
        let mut i = 0;
        'outer: while i < tokens.len() {
            let longest = self.max_surface_len.min(tokens.len() - i);
            for n in (1..=longest).rev() {
                if let Some(canon) = self.entries.get(&tokens[i..i + n]) {
                    out.extend(canon.iter().cloned());
                    i += n;
                    continue 'outer;
                }
            }
            out.push(tokens[i].clone());
            i += 1;
        }
        out
    }

    /// Tokenizes and canonicalizes in one step.
    pub fn canonical_tokens(&self, text: &str) -> Vec<String> {
        self.canonicalize(&tokenize(text))
    }
}

/// 64-bit FNV-1a; stable across platforms and toolchains.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone)]
pub struct StubEmbedder {
    dimension: usize,
    seed: u64,
    synonyms: Arc<SynonymTable>,
}

impl StubEmbedder {
    pub fn new(dimension: usize, seed: u64, synonyms: Arc<SynonymTable>) -> Self {
        assert!(dimension > 0, "dimension must be positive");
        Self {
            dimension,
            seed,
            synonyms,
        }
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token.as_bytes()) ^ self.seed.rotate_left(17));
        let raw: Vec<f64> = (0..self.dimension).map(|_| StandardNormal.sample(&mut rng)).collect();
        normalize(raw).map_or_else(|_| vec![0.0; self.dimension], EmbeddingVector::into_inner)
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        // Sorted counts make the sum independent of token order.
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in self.synonyms.canonical_tokens(text) {
            *counts.entry(t).or_default() += 1;
        }
        if counts.is_empty() {
            counts.insert(EMPTY_TOKEN.to_string(), 1);
        }
        let mut sum = vec![0.0; self.dimension];
        for (token, count) in &counts {
            let v = self.token_vector(token);
            for (s, x) in sum.iter_mut().zip(v) {
                *s += *count as f64 * x;
            }
        }
        normalize(sum)
    }
}

impl Embedder for StubEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_texts(&self, texts: &[&str], _role: EmbedRole) -> Result<Vec<EmbeddingVector>, EmbedError> {
        check_non_empty(texts)?;
        texts.iter().map(|t| self.embed_text(t)).collect()
    }
}

/// Client for an embedding server speaking
/// `{"texts": [...], "role": "query"|"passage"}` → `{"vectors": [[...]]}`.
pub struct RemoteEmbedder {
    endpoint_url: String,
    dimension: usize,
    timeout: Duration,
    max_batch: usize,
    transport: Arc<dyn Transport>,
}

impl RemoteEmbedder {
    pub fn new(
        endpoint_url: impl Into<String>,
        dimension: usize,
        timeout: Duration,
        max_batch: usize,
        transport: Arc<dyn Transport>,
    ) -> Self {
        Self {
            endpoint_url: endpoint_url.into(),
            dimension,
            timeout,
            max_batch: max_batch.max(1),
            transport,
        }
    }

    fn embed_batch(&self, texts: &[&str], role: EmbedRole) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let body = json!({ "texts": texts, "role": role });
        let response = self.transport.post_json(&self.endpoint_url, &body, self.timeout)?;
        let vectors = response
            .get("vectors")
            .and_then(|v| v.as_array())
            .ok_or_else(|| EmbedError::Malformed("missing `vectors` array".into()))?;
        if vectors.len() != texts.len() {
            return Err(EmbedError::CountMismatch {
                expected: texts.len(),
                got: vectors.len(),
            });
        }
        vectors
            .iter()
            .map(|v| {
                let raw: Vec<f64> =
                    serde_json::from_value(v.clone()).map_err(|e| EmbedError::Malformed(e.to_string()))?;
                if raw.len() != self.dimension {
                    return Err(EmbedError::DimensionMismatch {
                        expected: self.dimension,
                        got: raw.len(),
                    });
                }
                normalize(raw)
            })
            .collect()
    }
}

impl Embedder for RemoteEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_texts(&self, texts: &[&str], role: EmbedRole) -> Result<Vec<EmbeddingVector>, EmbedError> {
        check_non_empty(texts)?;
        let mut out = Vec::with_capacity(texts.len());
        for batch in texts.chunks(self.max_batch) {
            out.extend(self.embed_batch(batch, role)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelMode {
    Remote,
    #[default]
    Stub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub mode: ModelMode,
    pub endpoint_url: Option<String>,
    pub dimension: usize,
    pub stub_seed: u64,
    pub synonym_table_path: Option<PathBuf>,
    pub timeout_s: u64,
    pub max_batch: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            mode: ModelMode::Stub,
            endpoint_url: None,
            dimension: DEFAULT_DIMENSION,
            stub_seed: 0,
            synonym_table_path: None,
            timeout_s: 30,
            max_batch: DEFAULT_MAX_BATCH,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.dimension == 0 {
            return Err(EmbedError::InvalidConfig("dimension must be > 0".into()));
        }
        if self.mode == ModelMode::Remote && self.endpoint_url.is_none() {
            return Err(EmbedError::InvalidConfig("remote mode requires endpoint_url".into()));
        }
        Ok(())
    }

    pub fn load_synonyms(&self) -> Result<Arc<SynonymTable>, EmbedError> {
        Ok(Arc::new(match &self.synonym_table_path {
            Some(p) => SynonymTable::load(p)?,
            None => SynonymTable::new(),
        }))
    }

    pub fn build(&self, transport: Arc<dyn Transport>) -> Result<Arc<dyn Embedder>, EmbedError> {
        self.validate()?;
        Ok(match self.mode {
            ModelMode::Stub => Arc::new(StubEmbedder::new(self.dimension, self.stub_seed, self.load_synonyms()?)),
            ModelMode::Remote => Arc::new(RemoteEmbedder::new(
                self.endpoint_url.clone().unwrap_or_default(),
                self.dimension,
                Duration::from_secs(self.timeout_s),
                self.max_batch,
                transport,
            )),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;
    use std::sync::Mutex;

    fn stub(synonyms: SynonymTable) -> StubEmbedder {
        StubEmbedder::new(DEFAULT_DIMENSION, 7, Arc::new(synonyms))
    }

    fn cos(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
        a.dot(b)
    }

    #[test]
    fn normalize_hand_values() {
        let mut raw = vec![0.0; DEFAULT_DIMENSION];
        raw[0] = 3.0;
        raw[1] = 4.0;
        let v = normalize(raw).unwrap();
        assert!((v.as_slice()[0] - 0.6).abs() < 1e-15);
        assert!((v.as_slice()[1] - 0.8).abs() < 1e-15);
        assert!(v.as_slice()[2..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn normalize_is_idempotent_on_unit_vectors() {
        let v = normalize((1..=768).map(|i| (i as f64).sin()).collect()).unwrap();
        let again = normalize(v.as_slice().to_vec()).unwrap();
        for (a, b) in v.as_slice().iter().zip(again.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_rejects_zero() {
        assert!(matches!(normalize(vec![0.0; 8]), Err(EmbedError::ZeroVector)));
        assert!(matches!(normalize(vec![f64::NAN, 1.0]), Err(EmbedError::NonFinite)));
    }

    #[test]
    fn stub_is_deterministic_and_unit() {
        let e = stub(SynonymTable::new());
        let out = e
            .embed_texts(&["same sentence", "same sentence"], EmbedRole::Passage)
            .unwrap();
        assert_eq!(out[0], out[1]);
        assert_eq!(out[0].dimension(), 768);
        let norm = out[0].as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn stub_synonyms_pull_paraphrases_together() {
        let mut table = SynonymTable::new();
        table.insert("transverse momentum", "pt");
        let e = stub(table);
        let v = e
            .embed_texts(
                &[
                    "transverse momentum requirement",
                    "pt cut requirement",
                    "detector alignment",
                ],
                EmbedRole::Query,
            )
            .unwrap();
        let para = cos(&v[0], &v[1]);
        assert!(para > cos(&v[0], &v[2]));
        assert!(para > cos(&v[1], &v[2]));
        // Canonical bags {pt, requirement} vs {pt, cut, requirement}: 2 / sqrt(2 * 3).
        assert!((para - 2.0 / 6f64.sqrt()).abs() < 0.15, "{para}");
    }

    #[test]
    fn stub_ignores_token_order() {
        let e = stub(SynonymTable::new());
        let a = e.embed_one("muon pt cut signal region", EmbedRole::Query).unwrap();
        let b = e.embed_one("region signal cut pt muon", EmbedRole::Query).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn punctuation_only_text_still_embeds() {
        let e = stub(SynonymTable::new());
        assert!(e.embed_one("---", EmbedRole::Passage).is_ok());
        assert!(matches!(
            e.embed_texts(&["ok", ""], EmbedRole::Passage),
            Err(EmbedError::EmptyText(1))
        ));
    }

    #[test]
    fn synonym_table_longest_match() {
        let table =
            SynonymTable::parse("# comment\ntransverse momentum\tpt\nmissing transverse momentum\tmet\n").unwrap();
        assert_eq!(
            table.canonical_tokens("Missing transverse momentum and transverse momentum"),
            vec!["met", "and", "pt"]
        );
        assert!(SynonymTable::parse("only one column\n").is_err());
    }

    struct Canned {
        response: Value,
        seen: Mutex<Vec<Value>>,
    }

    impl Transport for Canned {
        fn post_json(&self, _url: &str, body: &Value, _t: Duration) -> Result<Value, TransportError> {
            self.seen.lock().unwrap().push(body.clone());
            Ok(self.response.clone())
        }
    }

    #[test]
    fn remote_rejects_wrong_dimension() {
        let transport = Arc::new(Canned {
            response: json!({ "vectors": [vec![0.5f64; 512]] }),
            seen: Mutex::new(Vec::new()),
        });
        let e = RemoteEmbedder::new("http://h:1/embed", 768, Duration::from_secs(1), 32, transport);
        assert!(matches!(
            e.embed_texts(&["x"], EmbedRole::Query),
            Err(EmbedError::DimensionMismatch {
                expected: 768,
                got: 512
            })
        ));
    }

    #[test]
    fn remote_sends_role_and_normalizes() {
        let transport = Arc::new(Canned {
            response: json!({ "vectors": [[3.0, 4.0]] }),
            seen: Mutex::new(Vec::new()),
        });
        let e = RemoteEmbedder::new("http://h:1/embed", 2, Duration::from_secs(1), 32, transport.clone());
        let v = e.embed_one("q", EmbedRole::Query).unwrap();
        assert_eq!(v.as_slice(), &[0.6, 0.8]);
        assert_eq!(
            transport.seen.lock().unwrap()[0],
            json!({"texts": ["q"], "role": "query"})
        );
    }

    #[test]
    fn remote_batches_requests() {
        struct Counting(Mutex<Vec<usize>>);
        impl Transport for Counting {
            fn post_json(&self, _u: &str, body: &Value, _t: Duration) -> Result<Value, TransportError> {
                let n = body["texts"].as_array().unwrap().len();
                self.0.lock().unwrap().push(n);
                Ok(json!({ "vectors": vec![vec![1.0, 0.0]; n] }))
            }
        }
        let transport = Arc::new(Counting(Mutex::new(Vec::new())));
        let e = RemoteEmbedder::new("http://h:1/e", 2, Duration::from_secs(1), 32, transport.clone());
        let texts: Vec<String> = (0..70).map(|i| format!("t{i}")).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        assert_eq!(e.embed_texts(&refs, EmbedRole::Passage).unwrap().len(), 70);
        assert_eq!(*transport.0.lock().unwrap(), vec![32, 32, 6]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn permutation_invariant(words in proptest::collection::vec("[a-z]{1,6}", 1..8), seed in any::<u64>()) {
                let e = StubEmbedder::new(64, seed, Arc::new(SynonymTable::new()));
                let mut rev = words.clone();
                rev.reverse();
                let a = e.embed_one(&words.join(" "), EmbedRole::Passage).unwrap();
                let b = e.embed_one(&rev.join(" "), EmbedRole::Passage).unwrap();
                prop_assert_eq!(a, b);
            }

            #[test]
            fn disjoint_vocab_below_self_similarity(
                left in proptest::collection::btree_set("[a-m]{2,5}", 1..6),
                right in proptest::collection::btree_set("[n-z]{2,5}", 1..6),
            ) {
                let e = StubEmbedder::new(768, 3, Arc::new(SynonymTable::new()));
                let l: Vec<_> = left.into_iter().collect();
                let r: Vec<_> = right.into_iter().collect();
                let a = e.embed_one(&l.join(" "), EmbedRole::Passage).unwrap();
                let b = e.embed_one(&r.join(" "), EmbedRole::Passage).unwrap();
                prop_assert!(a.dot(&b) < a.dot(&a));
                prop_assert!(a.dot(&b).abs() < 0.5);
            }
        }
    }
}
