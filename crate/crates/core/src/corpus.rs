//! Document corpus: analyses, versioned documents and their paragraph chunks.
//!
//! The corpus is the offline half of the system. Text arrives already
//! extracted (one JSON record per line), gets split into paragraph chunks and
//! is persisted as line-delimited JSON so that a diff between two corpus
//! snapshots stays readable.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Paragraphs shorter than this (in characters) are folded into a neighbour.
pub const DEFAULT_MIN_PARAGRAPH_CHARS: usize = 20;

const CORPUS_FORMAT: &str = "mitra-corpus";
const CORPUS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("unknown analysis `{0}`")]
    UnknownAnalysis(String),
    #[error("document `{doc_id}` version {incoming} is not newer than stored version {stored}")]
    StaleVersion { doc_id: String, stored: u64, incoming: u64 },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt corpus file at line {line}: {message}")]
    Format { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisRecord {
    pub analysis_id: String,
    pub title: String,
    pub abstract_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub analysis_id: String,
    pub body_text: String,
    #[serde(default = "default_version")]
    pub version: u64,
}

fn default_version() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub analysis_id: String,
    pub doc_id: String,
    pub ordinal: usize,
    pub text: String,
}

impl Chunk {
    pub fn make_id(doc_id: &str, ordinal: usize) -> String {
        format!("{doc_id}#{ordinal}")
    }
}

/// One line of an ingestion file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum IngestRecord {
    Analysis(AnalysisRecord),
    Document(Document),
}

/// One line of a persisted corpus file.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum StoredRecord {
    Header {
        format: String,
        version: u32,
    },
    Analysis(AnalysisRecord),
    Document(Document),
    Chunk(Chunk),
    End {
        analyses: usize,
        documents: usize,
        chunks: usize,
    },
}

/// Splits a document body into paragraph chunks.
///
/// Paragraphs are separated by one or more blank (empty or whitespace-only)
/// lines. Each paragraph is trimmed. A paragraph shorter than `min_chars` is
/// prepended to the following paragraph with a newline, or appended to the
/// preceding one when it is the last.
pub fn split_paragraphs_with(body_text: &str, min_chars: usize) -> Vec<String> {
    let normalized = body_text.replace("\r\n", "\n").replace('\r', "\n");

    let mut raw: Vec<String> = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in normalized.split('\n') {
        if line.trim().is_empty() {
            if !current.is_empty() {
                raw.push(current.join("\n"));
                current.clear();
            }
        } else {
            current.push(line);
        }
    }
    if !current.is_empty() {
        raw.push(current.join("\n"));
    }

    let paragraphs: Vec<&str> = raw.iter().map(|p| p.trim()).filter(|p| !p.is_empty()).collect();

    let mut out: Vec<String> = Vec::with_capacity(paragraphs.len());
    let mut pending: Option<String> = None;
    let last = paragraphs.len().saturating_sub(1);
    for (i, para) in paragraphs.iter().enumerate() {
        let text = match pending.take() {
            Some(prefix) => format!("{prefix}\n{para}"),
            None => (*para).to_string(),
        };
        let short = text.chars().count() < min_chars;
        if short && i < last {
            pending = Some(text);
        } else if short && i == last && !out.is_empty() {
            let prev = out.last_mut().expect("non-empty");
            prev.push('\n');
            prev.push_str(&text);
        } else {
            out.push(text);
        }
    }
    out
}

pub fn split_paragraphs(body_text: &str) -> Vec<String> {
    split_paragraphs_with(body_text, DEFAULT_MIN_PARAGRAPH_CHARS)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorpusStore {
    analyses: BTreeMap<String, AnalysisRecord>,
    documents: BTreeMap<String, Document>,
    chunks: BTreeMap<String, Chunk>,
    min_paragraph_chars: Option<usize>,
}

impl CorpusStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Overrides the short-paragraph merge threshold for subsequent ingests.
    pub fn with_min_paragraph_chars(mut self, min_chars: usize) -> Self {
        self.min_paragraph_chars = Some(min_chars);
        self
    }

    /// Registers an analysis, replacing title and abstract if it already exists.
    pub fn upsert_analysis(&mut self, record: AnalysisRecord) -> Result<(), CorpusError> {
        if record.analysis_id.is_empty() {
            return Err(CorpusError::InvalidRecord("empty analysis_id".into()));
        }
        if record.abstract_text.trim().is_empty() {
            return Err(CorpusError::InvalidRecord(format!(
                "analysis `{}` has an empty abstract",
                record.analysis_id
            )));
        }
        self.analyses.insert(record.analysis_id.clone(), record);
        Ok(())
    }

    /// Chunks `doc` and stores it, replacing every chunk of an older version.
    pub fn ingest_document(&mut self, doc: Document) -> Result<Vec<Chunk>, CorpusError> {
        if doc.doc_id.is_empty() || doc.doc_id.contains('#') {
            return Err(CorpusError::InvalidRecord(format!(
                "doc_id `{}` must be non-empty and must not contain '#'",
                doc.doc_id
            )));
        }
        if !self.analyses.contains_key(&doc.analysis_id) {
            return Err(CorpusError::UnknownAnalysis(doc.analysis_id));
        }
        if let Some(stored) = self.documents.get(&doc.doc_id) {
            if doc.version <= stored.version {
                return Err(CorpusError::StaleVersion {
                    doc_id: doc.doc_id,
                    stored: stored.version,
                    incoming: doc.version,
                });
            }
            if stored.analysis_id != doc.analysis_id {
                return Err(CorpusError::InvalidRecord(format!(
                    "document `{}` cannot move from analysis `{}` to `{}`",
                    doc.doc_id, stored.analysis_id, doc.analysis_id
                )));
            }
        }

        let stale: Vec<String> = self.chunk_ids_of(&doc.doc_id).collect();
        for id in stale {
            self.chunks.remove(&id);
        }

        let min_chars = self.min_paragraph_chars.unwrap_or(DEFAULT_MIN_PARAGRAPH_CHARS);
        let created: Vec<Chunk> = split_paragraphs_with(&doc.body_text, min_chars)
            .into_iter()
            .enumerate()
            .map(|(ordinal, text)| Chunk {
                chunk_id: Chunk::make_id(&doc.doc_id, ordinal),
                analysis_id: doc.analysis_id.clone(),
                doc_id: doc.doc_id.clone(),
                ordinal,
                text,
            })
            .collect();
        for chunk in &created {
            self.chunks.insert(chunk.chunk_id.clone(), chunk.clone());
        }
        self.documents.insert(doc.doc_id.clone(), doc);
        Ok(created)
    }

    fn chunk_ids_of<'a>(&'a self, doc_id: &str) -> impl Iterator<Item = String> + 'a {
        let prefix = format!("{doc_id}#");
        self.chunks
            .range(prefix.clone()..)
            .take_while(move |(id, _)| id.starts_with(&prefix))
            .map(|(id, _)| id.clone())
    }

    pub fn analysis(&self, analysis_id: &str) -> Option<&AnalysisRecord> {
        self.analyses.get(analysis_id)
    }

    pub fn analyses(&self) -> impl Iterator<Item = &AnalysisRecord> {
        self.analyses.values()
    }

    pub fn document(&self, doc_id: &str) -> Option<&Document> {
        self.documents.get(doc_id)
    }

    pub fn documents(&self) -> impl Iterator<Item = &Document> {
        self.documents.values()
    }

    pub fn chunk(&self, chunk_id: &str) -> Option<&Chunk> {
        self.chunks.get(chunk_id)
    }

    pub fn chunks(&self) -> impl Iterator<Item = &Chunk> {
        self.chunks.values()
    }

    /// Chunks of one document in ordinal order.
    pub fn chunks_of_document(&self, doc_id: &str) -> Vec<&Chunk> {
        let prefix = format!("{doc_id}#");
        let mut out: Vec<&Chunk> = self
            .chunks
            .range(prefix.clone()..)
            .take_while(|(id, _)| id.starts_with(&prefix))
            .map(|(_, c)| c)
            .collect();
        out.sort_by_key(|c| c.ordinal);
        out
    }

    /// All chunks belonging to an analysis, grouped by document then ordinal.
    pub fn chunks_of_analysis(&self, analysis_id: &str) -> Vec<&Chunk> {
        self.documents
            .values()
            .filter(|d| d.analysis_id == analysis_id)
            .flat_map(|d| self.chunks_of_document(&d.doc_id))
            .collect()
    }

    pub fn analysis_count(&self) -> usize {
        self.analyses.len()
    }

    pub fn document_count(&self) -> usize {
        self.documents.len()
    }

    pub fn chunk_count(&self) -> usize {
        self.chunks.len()
    }

    /// Checks referential integrity and ordinal contiguity.
    pub fn validate(&self) -> Result<(), CorpusError> {
        for doc in self.documents.values() {
            if !self.analyses.contains_key(&doc.analysis_id) {
                return Err(CorpusError::UnknownAnalysis(doc.analysis_id.clone()));
            }
        }
        for chunk in self.chunks.values() {
            let doc = self.documents.get(&chunk.doc_id).ok_or_else(|| {
                CorpusError::InvalidRecord(format!(
                    "chunk `{}` references missing document `{}`",
                    chunk.chunk_id, chunk.doc_id
                ))
            })?;
            if doc.analysis_id != chunk.analysis_id {
                return Err(CorpusError::InvalidRecord(format!(
                    "chunk `{}` analysis `{}` disagrees with its document",
                    chunk.chunk_id, chunk.analysis_id
                )));
            }
            if chunk.chunk_id != Chunk::make_id(&chunk.doc_id, chunk.ordinal) {
                return Err(CorpusError::InvalidRecord(format!(
                    "chunk id `{}` does not match doc/ordinal",
                    chunk.chunk_id
                )));
            }
        }
        for doc in self.documents.values() {
            for (expected, chunk) in self.chunks_of_document(&doc.doc_id).iter().enumerate() {
                if chunk.ordinal != expected {
                    return Err(CorpusError::InvalidRecord(format!(
                        "document `{}` has non-contiguous ordinals",
                        doc.doc_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Outcome of feeding an ingestion file into a store.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestSummary {
    pub analyses: usize,
    pub documents: usize,
    pub chunks_created: usize,
    /// Documents skipped because the stored version was already as new.
    pub stale: Vec<String>,
}

/// Applies one ingestion record.
pub fn apply_record(
    store: &mut CorpusStore,
    record: IngestRecord,
    summary: &mut IngestSummary,
) -> Result<(), CorpusError> {
    match record {
        IngestRecord::Analysis(a) => {
            store.upsert_analysis(a)?;
            summary.analyses += 1;
        }
        IngestRecord::Document(d) => match store.ingest_document(d) {
            Ok(chunks) => {
                summary.documents += 1;
                summary.chunks_created += chunks.len();
            }
            Err(CorpusError::StaleVersion { doc_id, .. }) => summary.stale.push(doc_id),
            Err(e) => return Err(e),
        },
    }
    Ok(())
}

/// Reads an ingestion file (`kind` = "analysis" | "document", one per line).
pub fn ingest_file(store: &mut CorpusStore, path: &Path) -> Result<IngestSummary, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut summary = IngestSummary::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: IngestRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Format {
            line: i + 1,
            message: e.to_string(),
        })?;
        apply_record(store, record, &mut summary)?;
    }
    Ok(summary)
}

pub fn write_ingest_records(path: &Path, records: &[IngestRecord]) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_corpus(store: &CorpusStore, path: &Path) -> Result<(), CorpusError> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        let mut emit = |rec: &StoredRecord| -> Result<(), CorpusError> {
            serde_json::to_writer(&mut w, rec).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
            Ok(())
        };
        emit(&StoredRecord::Header {
            format: CORPUS_FORMAT.into(),
            version: CORPUS_FORMAT_VERSION,
        })?;
        for a in store.analyses.values() {
            emit(&StoredRecord::Analysis(a.clone()))?;
        }
        for d in store.documents.values() {
            emit(&StoredRecord::Document(d.clone()))?;
        }
        for c in store.chunks.values() {
            emit(&StoredRecord::Chunk(c.clone()))?;
        }
        emit(&StoredRecord::End {
            analyses: store.analyses.len(),
            documents: store.documents.len(),
            chunks: store.chunks.len(),
        })?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<CorpusStore, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut store = CorpusStore::new();
    let mut seen_header = false;
    let mut finished = false;
    let mut last_line = 0;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        last_line = line_no;
        let line = line?;
        let fmt = |message: String| CorpusError::Format { line: line_no, message };
        if finished {
            return Err(fmt("data after end marker".into()));
        }
        let record: StoredRecord = serde_json::from_str(&line).map_err(|e| fmt(e.to_string()))?;
        match record {
            StoredRecord::Header { format, version } => {
                if seen_header || format != CORPUS_FORMAT || version != CORPUS_FORMAT_VERSION {
                    return Err(fmt(format!("unexpected header {format} v{version}")));
                }
                seen_header = true;
            }
            _ if !seen_header => return Err(fmt("missing header".into())),
            StoredRecord::Analysis(a) => {
                store.analyses.insert(a.analysis_id.clone(), a);
            }
            StoredRecord::Document(d) => {
                store.documents.insert(d.doc_id.clone(), d);
            }
            StoredRecord::Chunk(c) => {
                store.chunks.insert(c.chunk_id.clone(), c);
            }
            StoredRecord::End {
                analyses,
                documents,
                chunks,
            } => {
                if (analyses, documents, chunks) != (store.analyses.len(), store.documents.len(), store.chunks.len()) {
                    return Err(fmt("record counts disagree with end marker".into()));
                }
                finished = true;
            }
        }
    }
    if !finished {
        return Err(CorpusError::Format {
            line: last_line,
            message: "file is truncated (no end marker)".into(),
        });
    }
    store.validate().map_err(|e| CorpusError::Format {
        line: last_line,
        message: e.to_string(),
    })?;
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn analysis(id: &str) -> AnalysisRecord {
        AnalysisRecord {
            analysis_id: id.into(),
            title: format!("Analysis {id}"),
            abstract_text: format!("Abstract of analysis {id}."),
        }
    }

    fn doc(id: &str, analysis: &str, version: u64, paragraphs: usize) -> Document {
        let body = (0..paragraphs)
            .map(|i| format!("Paragraph {i} of {id} is long enough to stand alone."))
            .collect::<Vec<_>>()
            .join("\n\n");
        Document {
            doc_id: id.into(),
            analysis_id: analysis.into(),
            body_text: body,
            version,
        }
    }

    #[test]
    fn short_paragraphs_merge_forward() {
        assert_eq!(split_paragraphs("A.\n\nB."), vec!["A.\nB.".to_string()]);
    }

    #[test]
    fn empty_body_has_no_chunks() {
        assert!(split_paragraphs("").is_empty());
        assert!(split_paragraphs("  \n\n \t\n").is_empty());
    }

    #[test]
    fn blank_line_runs_separate_paragraphs() {
        let body = "para one is long enough to stand alone here\n\n\npara two is also long enough to stand alone";
        assert_eq!(
            split_paragraphs(body),
            vec![
                "para one is long enough to stand alone here".to_string(),
                "para two is also long enough to stand alone".to_string()
            ]
        );
    }

    #[test]
    fn heading_attaches_to_next_paragraph() {
        let body = "1. Introduction\r\n\r\nThe measurement uses the full dataset.\r\n   \r\nShort tail";
        assert_eq!(
            split_paragraphs(body),
            vec!["1. Introduction\nThe measurement uses the full dataset.\nShort tail".to_string()]
        );
    }

    #[test]
    fn whitespace_only_lines_count_as_blank() {
        let body = "first paragraph with enough characters\n \t \nsecond paragraph with enough characters";
        assert_eq!(split_paragraphs(body).len(), 2);
    }

    #[test]
    fn threshold_is_configurable() {
        assert_eq!(split_paragraphs_with("A.\n\nB.", 0), vec!["A.", "B."]);
    }

    #[test]
    fn newer_version_replaces_chunks() {
        let mut store = CorpusStore::new();
        store.upsert_analysis(analysis("a")).unwrap();
        assert_eq!(store.ingest_document(doc("d", "a", 1, 5)).unwrap().len(), 5);
        assert_eq!(store.chunk_count(), 5);
        assert_eq!(store.ingest_document(doc("d", "a", 2, 3)).unwrap().len(), 3);
        assert_eq!(store.chunk_count(), 3);
        assert_eq!(store.document("d").unwrap().version, 2);
        store.validate().unwrap();
    }

    #[test]
    fn unknown_analysis_is_rejected() {
        let mut store = CorpusStore::new();
        let err = store.ingest_document(doc("d", "nope", 1, 2)).unwrap_err();
        assert!(matches!(err, CorpusError::UnknownAnalysis(a) if a == "nope"));
    }

    #[test]
    fn same_version_twice_is_stale_and_noop() {
        let mut store = CorpusStore::new();
        store.upsert_analysis(analysis("a")).unwrap();
        store.ingest_document(doc("d", "a", 1, 4)).unwrap();
        let before = store.clone();
        let err = store.ingest_document(doc("d", "a", 1, 2)).unwrap_err();
        assert!(matches!(
            err,
            CorpusError::StaleVersion {
                stored: 1,
                incoming: 1,
                ..
            }
        ));
        assert_eq!(store, before);
    }

    #[test]
    fn prefix_doc_ids_do_not_collide() {
        let mut store = CorpusStore::new();
        store.upsert_analysis(analysis("a")).unwrap();
        store.ingest_document(doc("d", "a", 1, 2)).unwrap();
        store.ingest_document(doc("d1", "a", 1, 12)).unwrap();
        assert_eq!(store.chunks_of_document("d").len(), 2);
        store.ingest_document(doc("d", "a", 2, 1)).unwrap();
        assert_eq!(store.chunks_of_document("d1").len(), 12);
        let ordinals: Vec<usize> = store.chunks_of_document("d1").iter().map(|c| c.ordinal).collect();
        assert_eq!(ordinals, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn hash_in_doc_id_is_rejected() {
        let mut store = CorpusStore::new();
        store.upsert_analysis(analysis("a")).unwrap();
        assert!(matches!(
            store.ingest_document(doc("x#1", "a", 1, 1)),
            Err(CorpusError::InvalidRecord(_))
        ));
    }

    #[test]
    fn round_trip_empty_and_populated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");

        let empty = CorpusStore::new();
        save_corpus(&empty, &path).unwrap();
        assert_eq!(load_corpus(&path).unwrap(), empty);

        let mut store = CorpusStore::new();
        for a in ["a", "b", "c"] {
            store.upsert_analysis(analysis(a)).unwrap();
        }
        for (i, a) in ["a", "a", "b", "c", "c"].iter().enumerate() {
            store.ingest_document(doc(&format!("d{i}"), a, 1, i + 1)).unwrap();
        }
        save_corpus(&store, &path).unwrap();
        let loaded = load_corpus(&path).unwrap();
        assert_eq!(loaded, store);
        assert_eq!(loaded.analysis_count(), 3);
        assert_eq!(loaded.document_count(), 5);
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let mut store = CorpusStore::new();
        store.upsert_analysis(analysis("a")).unwrap();
        store.ingest_document(doc("d", "a", 1, 3)).unwrap();
        save_corpus(&store, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        // Cut mid-line and exactly at a line boundary.
        let cut_mid = bytes.len() / 2;
        let cut_line = bytes[..bytes.len() - 1].iter().rposition(|&b| b == b'\n').unwrap() + 1;
        for cut in [cut_mid, cut_line] {
            std::fs::write(&path, &bytes[..cut]).unwrap();
            assert!(matches!(load_corpus(&path), Err(CorpusError::Format { .. })));
        }
    }

    #[test]
    fn ingest_file_reports_stale_documents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("input.jsonl");
        let records = vec![
            IngestRecord::Analysis(analysis("a")),
            IngestRecord::Document(doc("d", "a", 1, 2)),
        ];
        write_ingest_records(&path, &records).unwrap();
        let mut store = CorpusStore::new();
        let first = ingest_file(&mut store, &path).unwrap();
        assert_eq!(first.chunks_created, 2);
        let second = ingest_file(&mut store, &path).unwrap();
        assert_eq!(second.stale, vec!["d".to_string()]);
        assert_eq!(store.chunk_count(), 2);
    }

    #[test]
    fn ingest_record_wire_shape() {
        let line = r#"{"kind":"document","doc_id":"an-1","analysis_id":"A","body_text":"text"}"#;
        let rec: IngestRecord = serde_json::from_str(line).unwrap();
        match rec {
            IngestRecord::Document(d) => assert_eq!(d.version, 1),
            other => panic!("unexpected {other:?}"),
        }
    }
}
