//! Rank-aware retrieval evaluation: P@k, R@k, MRR and NDCG@k over gold
//! query sets, comparing the dense pipeline against the BM25 baseline.
//!
//! Relevance is binary and labelled per chunk. P@k always divides by `k`,
//! even when a system returns fewer than `k` results, so a single relevant
//! passage in the top five gives P@5 = 0.2.

use std::collections::{BTreeSet, HashSet};
use std::fmt::{self, Write as _};
use std::fs::File;
use std::hash::Hash;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::{Engine, PipelineError};

pub const CUTOFFS: [usize; 3] = [1, 3, 5];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("k must be at least 1")]
    InvalidK,
    #[error("relevant set is empty")]
    EmptyRelevantSet,
    #[error("no queries to average over")]
    NoQueries,
}

pub fn precision_at_k<T: Eq + Hash>(ranking: &[T], relevant: &HashSet<T>, k: usize) -> Result<f64, MetricError> {
    if k == 0 {
        return Err(MetricError::InvalidK);
    }
    let hits = ranking.iter().take(k).filter(|id| relevant.contains(id)).count();
    Ok(hits as f64 / k as f64)
}

pub fn recall_at_k<T: Eq + Hash>(ranking: &[T], relevant: &HashSet<T>, k: usize) -> Result<f64, MetricError> {
    if relevant.is_empty() {
        return Err(MetricError::EmptyRelevantSet);
    }
    if k == 0 {
        return Err(MetricError::InvalidK);
    }
    let hits = ranking.iter().take(k).filter(|id| relevant.contains(id)).count();
    Ok(hits as f64 / relevant.len() as f64)
}

/// 1 / rank of the first relevant item within the top `k`, or 0.
pub fn reciprocal_rank<T: Eq + Hash>(ranking: &[T], relevant: &HashSet<T>, k: usize) -> f64 {
    ranking
        .iter()
        .take(k)
        .position(|id| relevant.contains(id))
        .map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

/// Mean reciprocal rank over `(ranking, relevant)` pairs with a shared cutoff.
pub fn mrr<T: Eq + Hash>(queries: &[(&[T], &HashSet<T>)], k: usize) -> Result<f64, MetricError> {
    if queries.is_empty() {
        return Err(MetricError::NoQueries);
    }
    let sum: f64 = queries.iter().map(|(r, rel)| reciprocal_rank(r, rel, k)).sum();
    Ok(sum / queries.len() as f64)
}

/// Binary-gain NDCG: `DCG@k = sum rel_i / log2(i + 1)` over the top `k`,
/// normalized by the DCG of an ideal ranking of the relevant set.
pub fn ndcg_at_k<T: Eq + Hash>(ranking: &[T], relevant: &HashSet<T>, k: usize) -> Result<f64, MetricError> {
    if relevant.is_empty() {
        return Err(MetricError::EmptyRelevantSet);
    }
    if k == 0 {
        return Err(MetricError::InvalidK);
    }
    let discount = |pos: usize| 1.0 / ((pos + 2) as f64).log2();
    let dcg: f64 = ranking
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, id)| relevant.contains(id))
        .map(|(i, _)| discount(i))
        .sum();
    let idcg: f64 = (0..relevant.len().min(k)).map(discount).sum();
    Ok(dcg / idcg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SetLabel {
    Set1,
    Set2,
}

impl fmt::Display for SetLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SetLabel::Set1 => "Set 1",
            SetLabel::Set2 => "Set 2",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum System {
    Bm25,
    Dense,
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            System::Bm25 => "Keyword Search (BM25)",
            System::Dense => "Dense + Rerank",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldQuery {
    pub query_id: String,
    pub analysis_id: String,
    pub query_text: String,
    pub relevant_chunk_ids: BTreeSet<String>,
    pub set_label: SetLabel,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("gold set is empty")]
    EmptyGold,
    #[error("unknown analysis `{0}`")]
    UnknownAnalysis(String),
    #[error("no full-text index for analysis `{0}`")]
    MissingIndex(String),
    #[error("invalid gold query `{query_id}`: {message}")]
    InvalidGold { query_id: String, message: String },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("gold file line {line}: {message}")]
    Format { line: usize, message: String },
}

pub fn load_gold(path: &Path) -> Result<Vec<GoldQuery>, EvalError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EvalError::Format {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_gold(path: &Path, gold: &[GoldQuery]) -> Result<(), EvalError> {
    let mut w = BufWriter::new(File::create(path)?);
    for g in gold {
        serde_json::to_writer(&mut w, g).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub p_at_1: f64,
    pub r_at_1: f64,
    pub p_at_3: f64,
    pub r_at_3: f64,
    pub p_at_5: f64,
    pub r_at_5: f64,
    pub mrr: f64,
    pub ndcg_at_3: f64,
    pub ndcg_at_5: f64,
}

impl MetricValues {
    fn for_ranking(ranking: &[&str], relevant: &HashSet<&str>, mrr_cutoff: usize) -> Result<Self, MetricError> {
        Ok(Self {
            p_at_1: precision_at_k(ranking, relevant, 1)?,
            r_at_1: recall_at_k(ranking, relevant, 1)?,
            p_at_3: precision_at_k(ranking, relevant, 3)?,
            r_at_3: recall_at_k(ranking, relevant, 3)?,
            p_at_5: precision_at_k(ranking, relevant, 5)?,
            r_at_5: recall_at_k(ranking, relevant, 5)?,
            mrr: reciprocal_rank(ranking, relevant, mrr_cutoff),
            ndcg_at_3: ndcg_at_k(ranking, relevant, 3)?,
            ndcg_at_5: ndcg_at_k(ranking, relevant, 5)?,
        })
    }

    fn as_array(&self) -> [f64; 9] {
        [
            self.p_at_1,
            self.r_at_1,
            self.p_at_3,
            self.r_at_3,
            self.p_at_5,
            self.r_at_5,
            self.mrr,
            self.ndcg_at_3,
            self.ndcg_at_5,
        ]
    }

    fn from_array(a: [f64; 9]) -> Self {
        Self {
            p_at_1: a[0],
            r_at_1: a[1],
            p_at_3: a[2],
            r_at_3: a[3],
            p_at_5: a[4],
            r_at_5: a[5],
            mrr: a[6],
            ndcg_at_3: a[7],
            ndcg_at_5: a[8],
        }
    }

    fn mean<'a>(values: impl Iterator<Item = &'a MetricValues>) -> (usize, Self) {
        let mut sum = [0.0; 9];
        let mut n = 0;
        for v in values {
            for (s, x) in sum.iter_mut().zip(v.as_array()) {
                *s += x;
            }
            n += 1;
        }
        if n > 0 {
            for s in &mut sum {
                *s /= n as f64;
            }
        }
        (n, Self::from_array(sum))
    }

    pub fn all_in_unit_interval(&self) -> bool {
        self.as_array().iter().all(|x| (0.0..=1.0).contains(x))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryBreakdown {
    pub query_id: String,
    pub set_label: SetLabel,
    pub system: System,
    pub ranking: Vec<String>,
    pub metrics: MetricValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetSummary {
    pub set_label: SetLabel,
    pub system: System,
    pub queries: usize,
    pub metrics: MetricValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub k_retrieve: usize,
    pub k_final: usize,
    pub bm25_k: usize,
    pub summaries: Vec<SetSummary>,
    pub per_query: Vec<QueryBreakdown>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Depth of the BM25 ranking; defaults to the pipeline's `k_final` so both
    /// systems are cut at the same depth.
    pub bm25_k: Option<usize>,
}

fn validate_gold(engine: &Engine, gold: &[GoldQuery]) -> Result<(), EvalError> {
    if gold.is_empty() {
        return Err(EvalError::EmptyGold);
    }
    for g in gold {
        let invalid = |message: String| EvalError::InvalidGold {
            query_id: g.query_id.clone(),
            message,
        };
        if engine.store().analysis(&g.analysis_id).is_none() {
            return Err(EvalError::UnknownAnalysis(g.analysis_id.clone()));
        }
        if engine.indexes().fulltext(&g.analysis_id).is_err() {
            return Err(EvalError::MissingIndex(g.analysis_id.clone()));
        }
        if g.query_text.trim().is_empty() {
            return Err(invalid("empty query text".into()));
        }
        if g.relevant_chunk_ids.is_empty() {
            return Err(invalid("no relevant chunks".into()));
        }
        for id in &g.relevant_chunk_ids {
            match engine.store().chunk(id) {
                None => return Err(invalid(format!("chunk `{id}` does not exist"))),
                Some(c) if c.analysis_id != g.analysis_id => {
                    return Err(invalid(format!("chunk `{id}` belongs to `{}`", c.analysis_id)))
                }
                Some(_) => {}
            }
        }
    }
    Ok(())
}

/// Runs both systems over every gold query and aggregates per query set.
pub fn run_eval(engine: &Engine, gold: &[GoldQuery], config: EvalConfig) -> Result<MetricsReport, EvalError> {
    validate_gold(engine, gold)?;
    let k_final = engine.config().k_final;
    let bm25_k = config.bm25_k.unwrap_or(k_final);

    let per_query: Vec<[QueryBreakdown; 2]> = gold
        .par_iter()
        .map(|g| -> Result<[QueryBreakdown; 2], EvalError> {
            let relevant: HashSet<&str> = g.relevant_chunk_ids.iter().map(String::as_str).collect();
            let dense: Vec<String> = engine
                .retrieve_and_rerank(&g.analysis_id, &g.query_text)?
                .into_iter()
                .map(|p| p.hit.chunk_id)
                .collect();
            let bm25: Vec<String> = engine
                .bm25_rank(&g.analysis_id, &g.query_text, bm25_k)?
                .into_iter()
                .map(|h| h.chunk_id)
                .collect();
            let row = |system: System, ranking: Vec<String>, cutoff: usize| -> Result<QueryBreakdown, EvalError> {
                let refs: Vec<&str> = ranking.iter().map(String::as_str).collect();
                Ok(QueryBreakdown {
                    query_id: g.query_id.clone(),
                    set_label: g.set_label,
                    system,
                    metrics: MetricValues::for_ranking(&refs, &relevant, cutoff)?,
                    ranking,
                })
            };
            Ok([row(System::Bm25, bm25, bm25_k)?, row(System::Dense, dense, k_final)?])
        })
        .collect::<Result<_, _>>()?;
    let per_query: Vec<QueryBreakdown> = per_query.into_iter().flatten().collect();

    let mut summaries = Vec::new();
    let labels: BTreeSet<SetLabel> = gold.iter().map(|g| g.set_label).collect();
    for label in labels {
        for system in [System::Bm25, System::Dense] {
            let (queries, metrics) = MetricValues::mean(
                per_query
                    .iter()
                    .filter(|q| q.set_label == label && q.system == system)
                    .map(|q| &q.metrics),
            );
            summaries.push(SetSummary {
                set_label: label,
                system,
                queries,
                metrics,
            });
        }
    }
    Ok(MetricsReport {
        k_retrieve: engine.config().k_retrieve,
        k_final,
        bm25_k,
        summaries,
        per_query,
    })
}

impl MetricsReport {
    pub fn summary(&self, set_label: SetLabel, system: System) -> Option<&MetricValues> {
        self.summaries
            .iter()
            .find(|s| s.set_label == set_label && s.system == system)
            .map(|s| &s.metrics)
    }

    fn table(&self, headers: &[&str], pick: impl Fn(&MetricValues) -> Vec<f64>) -> String {
        let system_width = self
            .summaries
            .iter()
            .map(|s| s.system.to_string().len())
            .max()
            .unwrap_or(6)
            .max("System".len());
        let mut out = String::new();
        let _ = write!(out, "{:<9}  {:<system_width$}", "Query Set", "System");
        for h in headers {
            let _ = write!(out, "  {h:>7}");
        }
        out.push('\n');
        let rule = 9 + 2 + system_width + headers.len() * 9;
        out.push_str(&"-".repeat(rule));
        out.push('\n');
        for s in &self.summaries {
            let _ = write!(
                out,
                "{:<9}  {:<system_width$}",
                s.set_label.to_string(),
                s.system.to_string()
            );
            for v in pick(&s.metrics) {
                let _ = write!(out, "  {v:>7.2}");
            }
            out.push('\n');
        }
        out
    }

    /// Precision / recall table.
    pub fn precision_recall_table(&self) -> String {
        self.table(&["P@1", "R@1", "P@3", "R@3", "P@5", "R@5"], |m| {
            vec![m.p_at_1, m.r_at_1, m.p_at_3, m.r_at_3, m.p_at_5, m.r_at_5]
        })
    }

    /// Rank-aware table.
    pub fn rank_table(&self) -> String {
        self.table(&["MRR", "NDCG@3", "NDCG@5"], |m| vec![m.mrr, m.ndcg_at_3, m.ndcg_at_5])
    }

    pub fn save_json(&self, path: &Path) -> Result<(), EvalError> {
        let json = serde_json::to_vec_pretty(self).map_err(std::io::Error::from)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self, EvalError> {
        let raw = std::fs::read(path)?;
        serde_json::from_slice(&raw).map_err(|e| EvalError::Format {
            line: e.line(),
            message: e.to_string(),
        })
    }
}
