//! Exact top-k cosine search and the two-tier index layout.
//!
//! Stored vectors are unit length, so cosine similarity is a dot product.
//! Vectors live in one contiguous `f32` buffer; dot products accumulate in
//! `f64`.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CorpusStore;
use crate::embed::{EmbedError, EmbedRole, Embedder, EmbeddingVector};

const INDEX_MAGIC: [u8; 4] = *b"MVIX";
const INDEX_VERSION: u16 = 1;
const MANIFEST_FILE: &str = "manifest.json";
const ABSTRACTS_FILE: &str = "abstracts.mvi";
const FULLTEXT_DIR: &str = "fulltext";
/// Reloaded vectors must be unit length within this tolerance.
const RELOAD_NORM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("dimension mismatch: index has {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("duplicate entry id `{0}`")]
    DuplicateId(String),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("corpus has no analyses")]
    EmptyCorpus,
    #[error("unknown analysis `{0}`")]
    UnknownAnalysis(String),
    #[error("no full-text index for analysis `{0}`")]
    MissingIndex(String),
    #[error("tier key sets disagree: {0}")]
    TierMismatch(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt index file: {0}")]
    Format(String),
}

/// One scored result. Ranks are 1-based and contiguous within a list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedHit {
    pub chunk_id: String,
    pub analysis_id: String,
    pub score: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dimension: usize,
    ids: Vec<String>,
    analysis_ids: Vec<String>,
    data: Vec<f32>,
    by_id: HashMap<String, usize>,
}

pub struct EntryRef<'a> {
    pub chunk_id: &'a str,
    pub analysis_id: &'a str,
    pub vector: &'a [f32],
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += f64::from(x[0]) * f64::from(y[0]);
        acc[1] += f64::from(x[1]) * f64::from(y[1]);
        acc[2] += f64::from(x[2]) * f64::from(y[2]);
        acc[3] += f64::from(x[3]) * f64::from(y[3]);
    }
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| f64::from(*x) * f64::from(*y))
        .sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Orders candidates best-first: higher score, then smaller id.
#[derive(Debug)]
struct Scored<'a> {
    score: f64,
    id: &'a str,
    idx: usize,
}

impl PartialEq for Scored<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scored<'_> {}

impl PartialOrd for Scored<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scored<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score.total_cmp(&other.score).then_with(|| other.id.cmp(self.id))
    }
}

impl VectorIndex {
    pub fn new(dimension: usize) -> Self {
        Self {
            dimension,
            ids: Vec::new(),
            analysis_ids: Vec::new(),
            data: Vec::new(),
            by_id: HashMap::new(),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn push(&mut self, chunk_id: &str, analysis_id: &str, vector: &EmbeddingVector) -> Result<(), IndexError> {
        let values: Vec<f32> = vector.as_slice().iter().map(|&x| x as f32).collect();
        self.push_raw(chunk_id, analysis_id, &values)
    }

    fn push_raw(&mut self, chunk_id: &str, analysis_id: &str, values: &[f32]) -> Result<(), IndexError> {
        if values.len() != self.dimension {
            return Err(IndexError::DimensionMismatch {
                expected: self.dimension,
                got: values.len(),
            });
        }
        if self.position(chunk_id).is_some() {
            return Err(IndexError::DuplicateId(chunk_id.to_string()));
        }
        self.by_id.insert(chunk_id.to_string(), self.ids.len());
        self.ids.push(chunk_id.to_string());
        self.analysis_ids.push(analysis_id.to_string());
        self.data.extend_from_slice(values);
        Ok(())
    }

    fn position(&self, chunk_id: &str) -> Option<usize> {
        self.by_id.get(chunk_id).copied()
    }

    pub fn entry(&self, i: usize) -> EntryRef<'_> {
        EntryRef {
            chunk_id: &self.ids[i],
            analysis_id: &self.analysis_ids[i],
            vector: &self.data[i * self.dimension..(i + 1) * self.dimension],
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = EntryRef<'_>> {
        (0..self.len()).map(|i| self.entry(i))
    }

    pub fn get(&self, chunk_id: &str) -> Option<EntryRef<'_>> {
        self.position(chunk_id).map(|i| self.entry(i))
    }

    /// Exact top-k by dot product, ties broken by ascending chunk id.
    pub fn search_topk(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<RankedHit>, IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        if query.dimension() != self.dimension {
            return Err(IndexError::DimensionMismatch {
                expected: self.dimension,
                got: query.dimension(),
            });
        }
        let q: Vec<f32> = query.as_slice().iter().map(|&x| x as f32).collect();
        let k = k.min(self.len());
        let mut heap: BinaryHeap<Reverse<Scored<'_>>> = BinaryHeap::with_capacity(k + 1);
        for (idx, row) in self.data.chunks_exact(self.dimension).enumerate() {
            let cand = Scored {
                score: dot(row, &q),
                id: &self.ids[idx],
                idx,
            };
            if heap.len() < k {
                heap.push(Reverse(cand));
            } else if let Some(Reverse(worst)) = heap.peek() {
                if cand > *worst {
                    heap.pop();
                    heap.push(Reverse(cand));
                }
            }
        }
        // Ascending order of Reverse<_> is best-first.
        Ok(heap
            .into_sorted_vec()
            .into_iter()
            .enumerate()
            .map(|(i, Reverse(s))| RankedHit {
                chunk_id: s.id.to_string(),
                analysis_id: self.analysis_ids[s.idx].clone(),
                score: s.score,
                rank: i + 1,
            })
            .collect())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), IndexError> {
        w.write_all(&INDEX_MAGIC)?;
        w.write_all(&INDEX_VERSION.to_le_bytes())?;
        w.write_all(&(self.dimension as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for e in self.entries() {
            for s in [e.chunk_id, e.analysis_id] {
                w.write_all(&(s.len() as u32).to_le_bytes())?;
                w.write_all(s.as_bytes())?;
            }
            for x in e.vector {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, IndexError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let mut cur = Cursor { buf: &buf, pos: 0 };
        if cur.take(4)? != INDEX_MAGIC {
            return Err(IndexError::Format("bad magic".into()));
        }
        let version = u16::from_le_bytes(cur.take(2)?.try_into().expect("2 bytes"));
        if version != INDEX_VERSION {
            return Err(IndexError::Format(format!("unsupported version {version}")));
        }
        let dimension = cur.u32()? as usize;
        let count = u64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes"));
        if dimension == 0 {
            return Err(IndexError::Format("zero dimension".into()));
        }
        let mut index = VectorIndex::new(dimension);
        let mut values = vec![0f32; dimension];
        for n in 0..count {
            let chunk_id = cur.string()?;
            let analysis_id = cur.string()?;
            let raw = cur.take(dimension * 4)?;
            for (v, b) in values.iter_mut().zip(raw.chunks_exact(4)) {
                *v = f32::from_le_bytes(b.try_into().expect("4 bytes"));
            }
            let norm = values.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > RELOAD_NORM_TOLERANCE {
                return Err(IndexError::Format(format!(
                    "record {n} is not unit length (norm {norm})"
                )));
            }
            index
                .push_raw(&chunk_id, &analysis_id, &values)
                .map_err(|e| IndexError::Format(e.to_string()))?;
        }
        if cur.pos != buf.len() {
            return Err(IndexError::Format(format!(
                "{} trailing bytes after {count} records",
                buf.len() - cur.pos
            )));
        }
        Ok(index)
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IndexError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| IndexError::Format(format!("unexpected end of file at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, IndexError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String, IndexError> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| IndexError::Format("id is not valid UTF-8".into()))
    }
}

/// Embeds every abstract; entry id = analysis id.
pub fn build_abstracts_index(store: &CorpusStore, embedder: &dyn Embedder) -> Result<VectorIndex, IndexError> {
    if store.analysis_count() == 0 {
        return Err(IndexError::EmptyCorpus);
    }
    let analyses: Vec<_> = store.analyses().collect();
    let texts: Vec<&str> = analyses.iter().map(|a| a.abstract_text.as_str()).collect();
    let vectors = embedder.embed_texts(&texts, EmbedRole::Passage)?;
    let mut index = VectorIndex::new(embedder.dimension());
    for (a, v) in analyses.iter().zip(&vectors) {
        index.push(&a.analysis_id, &a.analysis_id, v)?;
    }
    Ok(index)
}

/// Embeds every chunk of one analysis.
pub fn build_fulltext_index(
    store: &CorpusStore,
    analysis_id: &str,
    embedder: &dyn Embedder,
) -> Result<VectorIndex, IndexError> {
    if store.analysis(analysis_id).is_none() {
        return Err(IndexError::UnknownAnalysis(analysis_id.to_string()));
    }
    let chunks = store.chunks_of_analysis(analysis_id);
    let mut index = VectorIndex::new(embedder.dimension());
    if chunks.is_empty() {
        return Ok(index);
    }
    let texts: Vec<&str> = chunks.iter().map(|c| c.text.as_str()).collect();
    let vectors = embedder.embed_texts(&texts, EmbedRole::Passage)?;
    for (c, v) in chunks.iter().zip(&vectors) {
        index.push(&c.chunk_id, &c.analysis_id, v)?;
    }
    Ok(index)
}

/// Abstracts index plus one full-text index per analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct TieredIndexSet {
    abstracts: VectorIndex,
    fulltext: BTreeMap<String, VectorIndex>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u16,
    dimension: usize,
    analyses: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    analysis_id: String,
    file: String,
}

impl TieredIndexSet {
    pub fn new(abstracts: VectorIndex, fulltext: BTreeMap<String, VectorIndex>) -> Result<Self, IndexError> {
        let abstract_keys: Vec<&str> = {
            let mut k: Vec<&str> = abstracts.entries().map(|e| e.chunk_id).collect();
            k.sort_unstable();
            k
        };
        let fulltext_keys: Vec<&str> = fulltext.keys().map(String::as_str).collect();
        if abstract_keys != fulltext_keys {
            return Err(IndexError::TierMismatch(format!(
                "abstracts {abstract_keys:?} vs full text {fulltext_keys:?}"
            )));
        }
        for (id, idx) in &fulltext {
            if idx.dimension() != abstracts.dimension() {
                return Err(IndexError::DimensionMismatch {
                    expected: abstracts.dimension(),
                    got: idx.dimension(),
                });
            }
            if let Some(e) = idx.entries().find(|e| e.analysis_id != id) {
                return Err(IndexError::TierMismatch(format!(
                    "chunk `{}` of analysis `{}` is filed under `{id}`",
                    e.chunk_id, e.analysis_id
                )));
            }
        }
        Ok(Self { abstracts, fulltext })
    }

    pub fn build(store: &CorpusStore, embedder: &dyn Embedder) -> Result<Self, IndexError> {
        let abstracts = build_abstracts_index(store, embedder)?;
        let mut fulltext = BTreeMap::new();
        for a in store.analyses() {
            fulltext.insert(
                a.analysis_id.clone(),
                build_fulltext_index(store, &a.analysis_id, embedder)?,
            );
        }
        Self::new(abstracts, fulltext)
    }

    pub fn abstracts(&self) -> &VectorIndex {
        &self.abstracts
    }

    pub fn fulltext(&self, analysis_id: &str) -> Result<&VectorIndex, IndexError> {
        self.fulltext
            .get(analysis_id)
            .ok_or_else(|| IndexError::MissingIndex(analysis_id.to_string()))
    }

    pub fn analysis_ids(&self) -> impl Iterator<Item = &str> {
        self.fulltext.keys().map(String::as_str)
    }

    pub fn dimension(&self) -> usize {
        self.abstracts.dimension()
    }

    pub fn fulltext_entry_count(&self) -> usize {
        self.fulltext.values().map(VectorIndex::len).sum()
    }

    pub fn save(&self, dir: &Path) -> Result<(), IndexError> {
        std::fs::create_dir_all(dir.join(FULLTEXT_DIR))?;
        self.abstracts.save(&dir.join(ABSTRACTS_FILE))?;
        let mut analyses = Vec::new();
        for (i, (id, idx)) in self.fulltext.iter().enumerate() {
            let file = format!("{FULLTEXT_DIR}/{i:05}.mvi");
            idx.save(&dir.join(&file))?;
            analyses.push(ManifestEntry {
                analysis_id: id.clone(),
                file,
            });
        }
        let manifest = Manifest {
            format: "mitra-tiered-index".into(),
            version: INDEX_VERSION,
            dimension: self.dimension(),
            analyses,
        };
        let json = serde_json::to_vec_pretty(&manifest).map_err(std::io::Error::from)?;
        std::fs::write(dir.join(MANIFEST_FILE), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, IndexError> {
        let raw = std::fs::read(dir.join(MANIFEST_FILE))?;
        let manifest: Manifest =
            serde_json::from_slice(&raw).map_err(|e| IndexError::Format(format!("manifest: {e}")))?;
        let abstracts = VectorIndex::load(&dir.join(ABSTRACTS_FILE))?;
        if abstracts.dimension() != manifest.dimension {
            return Err(IndexError::Format("manifest dimension disagrees with abstracts".into()));
        }
        let mut fulltext = BTreeMap::new();
        for entry in manifest.analyses {
            if entry.file.contains("..") {
                return Err(IndexError::Format(format!("suspicious path `{}`", entry.file)));
            }
            fulltext.insert(entry.analysis_id, VectorIndex::load(&dir.join(&entry.file))?);
        }
        Self::new(abstracts, fulltext)
    }
}
