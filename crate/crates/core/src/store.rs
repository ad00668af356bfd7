//! Embedded rationale store with exact cosine top-k retrieval.
//!
//! Persisted as JSONL: a header line `{"schema":1,"dims":D,"embedder":"..."}`
//! followed by one record per line.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::gateway::{EmbedRequest, GatewayClient, GatewayError};
use crate::rationale::{Rationale, RationaleMode};
use crate::types::{PageRef, RegionOrigin};

pub const DEFAULT_DIMS: usize = 256;
pub const SCHEMA_VERSION: u32 = 1;
/// Pages per store partition.
pub const DEFAULT_PARTITION_SIZE: usize = 25;

const FNV_OFFSET: u64 = 14695981039346656037;
const FNV_PRIME: u64 = 1099511628211;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

/// Maximal runs of alphanumeric characters, lowercased.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_owned).collect()
}

/// Signed feature hashing of the token bag, L2-normalized unless all-zero.
pub fn hashing_embed(text: &str, dims: usize) -> Vec<f64> {
    let dims = dims.max(1);
    let mut v = vec![0.0; dims];
    for token in tokenize(text) {
        let h = fnv1a64(token.as_bytes());
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[(h % dims as u64) as usize] += sign;
    }
    normalize(&mut v);
    v
}

pub fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("embedding failed for {rationale_id}: {source}")]
    Embedding { rationale_id: String, source: GatewayError },
    #[error("query embedding failed: {0}")]
    QueryEmbedding(GatewayError),
    #[error("duplicate rationale id {0}")]
    DuplicateId(String),
    #[error("embedder returned vectors of inconsistent dimension")]
    DimensionMismatch,
    #[error("store was built with {stored:?} but queried with {given:?}")]
    StoreMismatch { stored: String, given: String },
    #[error("store is empty")]
    EmptyStore,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("line {line}: {reason}")]
    Load { line: usize, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Text to dense vector. Implementations must be deterministic for a fixed fingerprint.
pub trait Embedder: Send + Sync {
    /// Identity recorded in the store header; retrieval refuses a different one.
    fn fingerprint(&self) -> String;

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashingEmbedder {
    pub dims: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self { dims: DEFAULT_DIMS }
    }
}

impl Embedder for HashingEmbedder {
    fn fingerprint(&self) -> String {
        format!("hashing-fnv1a64:dims={}:offset={FNV_OFFSET}:prime={FNV_PRIME}", self.dims)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        Ok(texts.iter().map(|t| hashing_embed(t, self.dims)).collect())
    }
}

/// Embeddings from the gateway's embedder role.
#[derive(Debug, Clone)]
pub struct GatewayEmbedder {
    client: Arc<GatewayClient>,
}

impl GatewayEmbedder {
    pub fn new(client: Arc<GatewayClient>) -> Self {
        Self { client }
    }
}

impl Embedder for GatewayEmbedder {
    fn fingerprint(&self) -> String {
        format!("gateway:{}", self.client.endpoint().model)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        self.client.embed(&EmbedRequest { texts: texts.to_vec() }).map(|r| r.vectors)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoreRecord {
    pub record_id: String,
    pub rationale: Rationale,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub record_id: String,
    pub score: f64,
    pub rank: usize,
}

/// Immutable after build; records are kept sorted by `record_id`.
#[derive(Debug, Clone, PartialEq)]
pub struct RagStore {
    embedder: String,
    dims: usize,
    records: Vec<StoreRecord>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: u32,
    dims: usize,
    embedder: String,
}

#[derive(Serialize, Deserialize)]
struct Line {
    record_id: String,
    doc_id: String,
    page_index: u32,
    component_id: String,
    origin: RegionOrigin,
    mode: RationaleMode,
    text: String,
    vector: Vec<f64>,
}

/// Embed every rationale and build a store. Record ids are the rationale ids.
pub fn build_store(rationales: Vec<Rationale>, embedder: &dyn Embedder) -> Result<RagStore, StoreError> {
    let mut seen = HashSet::new();
    for r in &rationales {
        if !seen.insert(r.rationale_id.as_str()) {
            return Err(StoreError::DuplicateId(r.rationale_id.clone()));
        }
    }
    let texts: Vec<String> = rationales.iter().map(|r| r.text.clone()).collect();
    let vectors = if texts.is_empty() {
        Vec::new()
    } else {
        embedder.embed(&texts).map_err(|batch_err| {
            // find the offending rationale; a batch-level failure names the first
            let culprit = rationales.iter().find_map(|r| {
                embedder.embed(std::slice::from_ref(&r.text)).err().map(|source| (r.rationale_id.clone(), source))
            });
            let (rationale_id, source) =
                culprit.unwrap_or_else(|| (rationales[0].rationale_id.clone(), batch_err));
            StoreError::Embedding { rationale_id, source }
        })?
    };
    if vectors.len() != rationales.len() {
        return Err(StoreError::DimensionMismatch);
    }
    let dims = vectors.first().map_or(0, Vec::len);
    if vectors.iter().any(|v| v.len() != dims) {
        return Err(StoreError::DimensionMismatch);
    }
    let mut records: Vec<StoreRecord> = rationales
        .into_iter()
        .zip(vectors)
        .map(|(rationale, mut vector)| {
            normalize(&mut vector);
            StoreRecord { record_id: rationale.rationale_id.clone(), rationale, vector }
        })
        .collect();
    records.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    Ok(RagStore { embedder: embedder.fingerprint(), dims, records })
}

impl RagStore {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn embedder(&self) -> &str {
        &self.embedder
    }

    pub fn records(&self) -> &[StoreRecord] {
        &self.records
    }

    pub fn get(&self, record_id: &str) -> Option<&StoreRecord> {
        self.records.binary_search_by(|r| r.record_id.as_str().cmp(record_id)).ok().map(|i| &self.records[i])
    }

    pub fn page_of(&self, record_id: &str) -> Option<&PageRef> {
        self.get(record_id).map(|r| &r.rationale.page)
    }

    pub fn pages(&self) -> BTreeSet<PageRef> {
        self.records.iter().map(|r| r.rationale.page.clone()).collect()
    }

    /// Records of one page, in record-id order.
    pub fn records_for_page<'a>(&'a self, page: &'a PageRef) -> impl Iterator<Item = &'a StoreRecord> + 'a {
        self.records.iter().filter(move |r| &r.rationale.page == page)
    }

    fn subset(&self, keep: impl Fn(&StoreRecord) -> bool) -> RagStore {
        RagStore {
            embedder: self.embedder.clone(),
            dims: self.dims,
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }

    /// Sort pages and split them into groups of `size` (0 means one group).
    pub fn partitions(&self, size: usize) -> Vec<RagStore> {
        let pages: Vec<PageRef> = self.pages().into_iter().collect();
        if size == 0 || pages.len() <= size {
            return vec![self.clone()];
        }
        pages
            .chunks(size)
            .map(|group| {
                let group: BTreeSet<&PageRef> = group.iter().collect();
                self.subset(|r| group.contains(&r.rationale.page))
            })
            .collect()
    }

    /// The partition holding `page`, if the page is in the store.
    pub fn partition_containing(&self, page: &PageRef, size: usize) -> Option<RagStore> {
        let pages: Vec<PageRef> = self.pages().into_iter().collect();
        let idx = pages.iter().position(|p| p == page)?;
        if size == 0 || pages.len() <= size {
            return Some(self.clone());
        }
        let start = idx / size * size;
        let group: BTreeSet<&PageRef> = pages[start..(start + size).min(pages.len())].iter().collect();
        Some(self.subset(|r| group.contains(&r.rationale.page)))
    }

    pub fn for_document(&self, doc_id: &str) -> RagStore {
        self.subset(|r| r.rationale.page.doc_id == doc_id)
    }

    pub fn persist(&self, path: impl AsRef<Path>) -> Result<(), StoreError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), StoreError> {
        let header = Header { schema: SCHEMA_VERSION, dims: self.dims, embedder: self.embedder.clone() };
        serde_json::to_writer(&mut *w, &header).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
        for r in &self.records {
            let line = Line {
                record_id: r.record_id.clone(),
                doc_id: r.rationale.page.doc_id.clone(),
                page_index: r.rationale.page.page_index,
                component_id: r.rationale.component_id.clone(),
                origin: r.rationale.origin,
                mode: r.rationale.mode,
                text: r.rationale.text.clone(),
                vector: r.vector.clone(),
            };
            serde_json::to_writer(&mut *w, &line).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RagStore, StoreError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    pub fn read_from(mut r: impl BufRead) -> Result<RagStore, StoreError> {
        let load = |line: usize, reason: String| StoreError::Load { line, reason };
        let mut buf = String::new();
        let mut line_no = 0;
        let mut header: Option<Header> = None;
        let mut records: BTreeMap<String, StoreRecord> = BTreeMap::new();
        loop {
            buf.clear();
            if r.read_line(&mut buf)? == 0 {
                break;
            }
            line_no += 1;
            if !buf.ends_with('\n') {
                return Err(load(line_no, "truncated line (no newline)".into()));
            }
            let text = buf.trim_end_matches(['\n', '\r']);
            let Some(h) = &header else {
                let h: Header = serde_json::from_str(text).map_err(|e| load(line_no, format!("bad header: {e}")))?;
                if h.schema != SCHEMA_VERSION {
                    return Err(load(line_no, format!("unsupported schema {}", h.schema)));
                }
                header = Some(h);
                continue;
            };
            let l: Line = serde_json::from_str(text).map_err(|e| load(line_no, e.to_string()))?;
            if l.vector.len() != h.dims {
                return Err(load(line_no, format!("vector has {} dims, header says {}", l.vector.len(), h.dims)));
            }
            let page = PageRef::new(l.doc_id, l.page_index).map_err(|e| load(line_no, e.to_string()))?;
            let record = StoreRecord {
                record_id: l.record_id.clone(),
                rationale: Rationale {
                    rationale_id: l.record_id.clone(),
                    page,
                    component_id: l.component_id,
                    origin: l.origin,
                    text: l.text,
                    mode: l.mode,
                },
                vector: l.vector,
            };
            if records.insert(l.record_id.clone(), record).is_some() {
                return Err(load(line_no, format!("duplicate record_id {}", l.record_id)));
            }
        }
        let h = header.ok_or_else(|| load(1, "missing header".into()))?;
        Ok(RagStore { embedder: h.embedder, dims: h.dims, records: records.into_values().collect() })
    }
}

/// Rank `store` against an already-embedded query.
pub fn rank_by_vector(query: &[f64], store: &RagStore, k: usize) -> Vec<RetrievalHit> {
    let mut q = query.to_vec();
    normalize(&mut q);
    let mut scored: Vec<(f64, &str)> =
        store.records.iter().map(|r| (dot(&q, &r.vector).clamp(-1.0, 1.0), r.record_id.as_str())).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    scored
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, (score, id))| RetrievalHit { record_id: id.to_owned(), score, rank: i + 1 })
        .collect()
}

/// Exact cosine top-k; ties go to the smaller record id.
pub fn retrieve_top_k(query: &str, store: &RagStore, k: usize, embedder: &dyn Embedder) -> Result<Vec<RetrievalHit>, StoreError> {
    if k == 0 {
        return Err(StoreError::InvalidK);
    }
    if store.is_empty() {
        return Err(StoreError::EmptyStore);
    }
    let given = embedder.fingerprint();
    if given != store.embedder {
        return Err(StoreError::StoreMismatch { stored: store.embedder.clone(), given });
    }
    let q = embedder.embed(&[query.to_owned()]).map_err(StoreError::QueryEmbedding)?;
    let q = q.into_iter().next().ok_or(StoreError::DimensionMismatch)?;
    if q.len() != store.dims {
        return Err(StoreError::DimensionMismatch);
    }
    Ok(rank_by_vector(&q, store, k))
}
