//! Okapi BM25 keyword ranking over chunks.
//!
//! Scores use the non-negative IDF variant
//! `ln(1 + (N - n_t + 0.5) / (n_t + 0.5))` so that terms occurring in more
//! than half of the chunks never push a score below zero.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::index::RankedHit;

#[derive(Debug, Error, PartialEq)]
pub enum LexicalError {
    #[error("unknown chunk `{0}`")]
    UnknownChunk(String),
    #[error("invalid BM25 parameters: k1={k1}, b={b}")]
    InvalidParams { k1: f64, b: f64 },
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.5, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<(), LexicalError> {
        if !(self.k1 >= 0.0 && (0.0..=1.0).contains(&self.b)) {
            return Err(LexicalError::InvalidParams { k1: self.k1, b: self.b });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Entry {
    chunk_id: String,
    analysis_id: String,
    len: usize,
}

/// Inverted index with per-chunk term frequencies.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    params: Bm25Params,
    entries: Vec<Entry>,
    by_id: HashMap<String, usize>,
    postings: HashMap<String, Vec<(usize, u32)>>,
    avg_len: f64,
}

impl Bm25Index {
    /// Builds an index from `(chunk_id, analysis_id, text)` triples.
    ///
    /// Duplicate chunk ids keep the first occurrence.
    pub fn build<'a, I>(chunks: I, params: Bm25Params) -> Result<Self, LexicalError>
    where
        I: IntoIterator<Item = (&'a str, &'a str, &'a str)>,
    {
        params.validate()?;
        let mut entries = Vec::new();
        let mut by_id = HashMap::new();
        let mut postings: HashMap<String, Vec<(usize, u32)>> = HashMap::new();
        let mut total_len = 0usize;
        for (chunk_id, analysis_id, text) in chunks {
            if by_id.contains_key(chunk_id) {
                continue;
            }
            let idx = entries.len();
            let tokens = tokenize(text);
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in &tokens {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for (term, f) in tf {
                postings.entry(term).or_default().push((idx, f));
            }
            total_len += tokens.len();
            by_id.insert(chunk_id.to_string(), idx);
            entries.push(Entry {
                chunk_id: chunk_id.to_string(),
                analysis_id: analysis_id.to_string(),
                len: tokens.len(),
            });
        }
        let avg_len = if entries.is_empty() {
            0.0
        } else {
            total_len as f64 / entries.len() as f64
        };
        Ok(Self {
            params,
            entries,
            by_id,
            postings,
            avg_len,
        })
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn chunk_len(&self, chunk_id: &str) -> Option<usize> {
        self.by_id.get(chunk_id).map(|&i| self.entries[i].len)
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.entries.len() as f64;
        let nt = self.doc_freq(term) as f64;
        (1.0 + (n - nt + 0.5) / (nt + 0.5)).ln()
    }

    fn term_weight(&self, idf: f64, tf: u32, len: usize) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = f64::from(tf);
        let norm = if self.avg_len > 0.0 {
            1.0 - b + b * (len as f64 / self.avg_len)
        } else {
            1.0 - b
        };
        idf * tf * (k1 + 1.0) / (tf + k1 * norm)
    }

    /// BM25 score of one chunk. Repeated query terms count once.
    pub fn score<S: AsRef<str>>(&self, query_terms: &[S], chunk_id: &str) -> Result<f64, LexicalError> {
        let &idx = self
            .by_id
            .get(chunk_id)
            .ok_or_else(|| LexicalError::UnknownChunk(chunk_id.to_string()))?;
        let len = self.entries[idx].len;
        let distinct: BTreeSet<&str> = query_terms.iter().map(AsRef::as_ref).collect();
        let mut score = 0.0;
        for term in distinct {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            if let Some(&(_, tf)) = list.iter().find(|(i, _)| *i == idx) {
                score += self.term_weight(self.idf(term), tf, len);
            }
        }
        Ok(score)
    }

    /// Top-k chunks for a free-text query; chunks scoring zero are left out.
    pub fn rank(&self, query: &str, k: usize) -> Vec<RankedHit> {
        if k == 0 {
            return Vec::new();
        }
        let terms: BTreeSet<String> = tokenize(query).into_iter().collect();
        let mut acc: HashMap<usize, f64> = HashMap::new();
        for term in &terms {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            let idf = self.idf(term);
            for &(idx, tf) in list {
                *acc.entry(idx).or_default() += self.term_weight(idf, tf, self.entries[idx].len);
            }
        }
        let mut scored: Vec<(usize, f64)> = acc.into_iter().filter(|&(_, s)| s > 0.0).collect();
        scored.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.entries[a.0].chunk_id.cmp(&self.entries[b.0].chunk_id))
        });
        scored.truncate(k);
        scored
            .into_iter()
            .enumerate()
            .map(|(i, (idx, score))| RankedHit {
                chunk_id: self.entries[idx].chunk_id.clone(),
                analysis_id: self.entries[idx].analysis_id.clone(),
                score,
                rank: i + 1,
            })
            .collect()
    }
}
