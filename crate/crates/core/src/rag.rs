//! End-to-end ingestion (layout, extraction, rationales, embedding) and grounded answering.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::extraction::{extract_page, FallbackPolicy};
use crate::gateway::{ChatModel, ChatRequest, GatewayError, Part};
use crate::layout::{detect_layout, fallback_component, group_components_with, GroupingThresholds, LayoutProvider, PageImage};
use crate::rationale::{rationalize, Rationale, RationaleMode, TableRewrite};
use crate::store::{build_store, retrieve_top_k, Embedder, RagStore, RetrievalHit, StoreError};
use crate::types::PageRef;

pub const DEFAULT_K: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum RagError {
    #[error("cannot read manifest {path}: {reason}")]
    Manifest { path: String, reason: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("cannot start worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestPage {
    pub doc_id: String,
    pub page_index: u32,
    /// Single-page PNG; relative paths resolve against the manifest's directory.
    pub image: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub pages: Vec<ManifestPage>,
}

impl CorpusManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, RagError> {
        let path = path.as_ref();
        let err = |reason: String| RagError::Manifest { path: path.display().to_string(), reason };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let mut manifest: CorpusManifest = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in &mut manifest.pages {
            if p.image.is_relative() {
                p.image = base.join(&p.image);
            }
        }
        manifest.validate().map_err(err)?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<(), String> {
        let mut seen = HashSet::new();
        for p in &self.pages {
            if p.doc_id.is_empty() {
                return Err("page with empty doc_id".into());
            }
            if !seen.insert((p.doc_id.as_str(), p.page_index)) {
                return Err(format!("page {}_p{} listed twice", p.doc_id, p.page_index));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestConfig {
    pub policy: FallbackPolicy,
    pub rewrite: TableRewrite,
    pub workers: usize,
    pub grouping: GroupingThresholds,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self { policy: FallbackPolicy::Always, rewrite: TableRewrite::Model, workers: 4, grouping: GroupingThresholds::default() }
    }
}

/// Models used during ingestion.
pub struct IngestModels<'a> {
    pub vlm: &'a dyn ChatModel,
    /// Required when tables are rewritten with the model.
    pub llm: Option<&'a dyn ChatModel>,
    pub embedder: &'a dyn Embedder,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageFailure {
    pub doc_id: String,
    pub page_index: u32,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub pages_total: usize,
    pub pages_ok: usize,
    pub pages_failed: Vec<PageFailure>,
    /// Pages where layout detection was unavailable.
    pub layout_unavailable: usize,
    pub regions_detected: usize,
    pub regions_extracted: usize,
    pub region_failures: usize,
    pub fallbacks_used: usize,
    pub template_fallbacks: usize,
    pub records: usize,
}

#[derive(Debug, Default)]
struct PageOutcome {
    rationales: Vec<Rationale>,
    layout_unavailable: bool,
    regions_detected: usize,
    regions_extracted: usize,
    region_failures: usize,
    fallback_used: bool,
    template_fallbacks: usize,
}

fn process_page(
    page: &PageRef,
    image_path: &Path,
    provider: &LayoutProvider,
    models: &IngestModels<'_>,
    config: &IngestConfig,
) -> Result<PageOutcome, String> {
    let image = PageImage::open(image_path).map_err(|e| e.to_string())?;
    let mut outcome = PageOutcome::default();
    let detected = match detect_layout(page, &image, provider) {
        Ok(c) => c,
        Err(e) => {
            log::warn!("{page}: {e}; falling back to the whole page");
            outcome.layout_unavailable = true;
            Vec::new()
        }
    };
    outcome.regions_detected = detected.len();
    let regions = group_components_with(detected, image.height(), &config.grouping);
    let page_component = fallback_component(page, &image);
    let extraction = extract_page(page, &regions, &page_component, models.vlm, config.policy).map_err(|e| e.to_string())?;
    outcome.region_failures = extraction.failures.len();
    outcome.fallback_used = extraction.fallback_used;
    outcome.regions_extracted = extraction.regions.len();
    for region in &extraction.regions {
        match rationalize(region, models.llm, config.rewrite) {
            Ok(r) => {
                if region.kind == crate::types::ComponentLabel::Table
                    && config.rewrite == TableRewrite::Model
                    && r.mode == RationaleMode::Template
                {
                    outcome.template_fallbacks += 1;
                }
                outcome.rationales.push(r);
            }
            Err(e) => log::warn!("{page}: {e}"),
        }
    }
    Ok(outcome)
}

/// Run every manifest page through layout, extraction and rewriting, then embed
/// all rationales into one store. Page failures are reported, never fatal.
pub fn ingest(
    manifest: &CorpusManifest,
    provider: &LayoutProvider,
    models: &IngestModels<'_>,
    config: &IngestConfig,
) -> Result<(RagStore, IngestReport), RagError> {
    if config.rewrite == TableRewrite::Model && models.llm.is_none() {
        return Err(RagError::Config("model rewriting needs an llm endpoint (or use the template rewrite)".into()));
    }
    manifest.validate().map_err(RagError::Config)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.max(1))
        .build()
        .map_err(|e| RagError::Pool(e.to_string()))?;
    let outcomes: Vec<(PageRef, Result<PageOutcome, String>)> = pool.install(|| {
        manifest
            .pages
            .par_iter()
            .map(|p| {
                let page = PageRef { doc_id: p.doc_id.clone(), page_index: p.page_index };
                let result = process_page(&page, &p.image, provider, models, config);
                (page, result)
            })
            .collect()
    });

    let mut report = IngestReport { pages_total: manifest.pages.len(), ..IngestReport::default() };
    let mut rationales = Vec::new();
    for (page, result) in outcomes {
        match result {
            Ok(o) => {
                report.pages_ok += 1;
                report.layout_unavailable += usize::from(o.layout_unavailable);
                report.regions_detected += o.regions_detected;
                report.regions_extracted += o.regions_extracted;
                report.region_failures += o.region_failures;
                report.fallbacks_used += usize::from(o.fallback_used);
                report.template_fallbacks += o.template_fallbacks;
                rationales.extend(o.rationales);
            }
            Err(reason) => {
                log::error!("{page}: {reason}");
                report.pages_failed.push(PageFailure { doc_id: page.doc_id, page_index: page.page_index, reason });
            }
        }
    }
    let store = build_store(rationales, models.embedder)?;
    report.records = store.len();
    Ok((store, report))
}

/// Instruction, numbered documents in rank order, then the question.
pub fn generation_prompt<'a>(question: &str, documents: impl IntoIterator<Item = &'a str>) -> String {
    let docs: Vec<String> = documents.into_iter().enumerate().map(|(i, t)| format!("[{}] {t}", i + 1)).collect();
    format!(
        "Use the information from the following documents to answer the question. Documents:\n{}\nQuestion: {question}\nAnswer:",
        docs.join("\n\n")
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedAnswer {
    pub text: String,
    pub hits: Vec<RetrievalHit>,
}

#[derive(Debug, thiserror::Error)]
pub enum AnswerError {
    #[error(transparent)]
    Retrieval(#[from] StoreError),
    /// Generation failed; the retrieval result is still returned.
    #[error("answer unavailable: {source}")]
    AnswerUnavailable { hits: Vec<RetrievalHit>, source: GatewayError },
}

pub fn answer_prompt(question: &str, store: &RagStore, hits: &[RetrievalHit]) -> String {
    generation_prompt(question, hits.iter().filter_map(|h| store.get(&h.record_id)).map(|r| r.rationale.text.as_str()))
}

/// Retrieve the top `k` rationales and ask the model to answer from them.
pub fn answer(
    question: &str,
    store: &RagStore,
    k: usize,
    llm: &dyn ChatModel,
    embedder: &dyn Embedder,
) -> Result<GroundedAnswer, AnswerError> {
    let hits = retrieve_top_k(question, store, k, embedder)?;
    let prompt = answer_prompt(question, store, &hits);
    let request = ChatRequest::for_endpoint(llm.endpoint(), vec![Part::text(prompt)]);
    match llm.chat(&request) {
        Ok(resp) => Ok(GroundedAnswer { text: resp.text, hits }),
        Err(source) => Err(AnswerError::AnswerUnavailable { hits, source }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_layout() {
        let p = generation_prompt("What?", ["alpha", "beta"]);
        assert_eq!(
            p,
            "Use the information from the following documents to answer the question. Documents:\n[1] alpha\n\n[2] beta\nQuestion: What?\nAnswer:"
        );
    }

    #[test]
    fn manifest_rejects_duplicates() {
        let m = CorpusManifest {
            pages: vec![
                ManifestPage { doc_id: "a".into(), page_index: 0, image: "x.png".into() },
                ManifestPage { doc_id: "a".into(), page_index: 0, image: "y.png".into() },
            ],
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn manifest_paths_resolve_against_its_directory() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        std::fs::write(&path, r#"{"pages":[{"doc_id":"d","page_index":0,"image":"d_p0.png"}]}"#).unwrap();
        let m = CorpusManifest::load(&path).unwrap();
        assert_eq!(m.pages[0].image, dir.path().join("d_p0.png"));
        assert!(matches!(CorpusManifest::load(dir.path().join("missing.json")), Err(RagError::Manifest { .. })));
    }
}
