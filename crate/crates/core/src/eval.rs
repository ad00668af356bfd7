//! Answer accuracy, judge-based L3Score and MRR@10, plus the QA drivers.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::gateway::{ChatModel, ChatRequest, GatewayError, Part, TokenLogprob};
use crate::prompts::L3SCORE_JUDGE;
use crate::rag::{answer, generation_prompt, AnswerError};
use crate::store::{retrieve_top_k, Embedder, RagStore, RetrievalHit, StoreError};
use crate::types::PageRef;

pub const MRR_CUTOFF: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no queries to evaluate")]
    EmptyQuerySet,
    #[error("{hits} hit lists for {golds} gold pages")]
    LengthMismatch { hits: usize, golds: usize },
    #[error("judge did not return token log-probabilities")]
    JudgeUnsupported,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("qa file line {line}: {reason}")]
    QaFile { line: usize, reason: String },
    #[error("cannot start worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaItem {
    pub question: String,
    pub answers: Vec<String>,
    pub gold: PageRef,
}

#[derive(Deserialize)]
struct QaLine {
    question: String,
    answers: Vec<String>,
    doc_id: String,
    page_index: u32,
}

/// JSONL with `question`, `answers`, `doc_id`, `page_index` per line.
pub fn load_qa(path: impl AsRef<Path>) -> Result<Vec<QaItem>, EvalError> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| EvalError::QaFile { line: 0, reason: e.to_string() })?;
    parse_qa(&text)
}

pub fn parse_qa(text: &str) -> Result<Vec<QaItem>, EvalError> {
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| EvalError::QaFile { line: i + 1, reason };
        let l: QaLine = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        if l.answers.is_empty() {
            return Err(bad("answers must be non-empty".into()));
        }
        let gold = PageRef::new(l.doc_id, l.page_index).map_err(|e| bad(e.to_string()))?;
        items.push(QaItem { question: l.question, answers: l.answers, gold });
    }
    Ok(items)
}

/// NFKC, lowercase, keep only letters, digits and whitespace, collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    let kept: String = s
        .nfkc()
        .flat_map(char::to_lowercase)
        .filter(|c| c.is_alphabetic() || c.is_numeric() || c.is_whitespace())
        .collect();
    kept.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Every normalized gold answer occurs in the normalized response.
pub fn exact_match(response: &str, golds: &[String]) -> bool {
    let response = normalize_answer(response);
    !response.is_empty() && !golds.is_empty() && golds.iter().all(|g| response.contains(&normalize_answer(g)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemScore {
    pub index: usize,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matched: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedItem {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub value: f64,
    pub stderr: f64,
    pub n: usize,
    pub per_item: Vec<ItemScore>,
    pub skipped: Vec<SkippedItem>,
}

impl EvalReport {
    /// Mean and standard error (sample std / sqrt(n)) of the item values.
    pub fn from_items(metric: impl Into<String>, per_item: Vec<ItemScore>, skipped: Vec<SkippedItem>) -> Result<Self, EvalError> {
        let n = per_item.len();
        if n == 0 {
            return Err(EvalError::EmptyQuerySet);
        }
        let mean = per_item.iter().map(|s| s.value).sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = per_item.iter().map(|s| (s.value - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Ok(Self { metric: metric.into(), value: mean, stderr, n, per_item, skipped })
    }

    /// `{"<metric>": value, ...}` summary used by the CLI.
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("report serializes");
        v[self.metric.as_str()] = serde_json::json!(self.value);
        v
    }
}

/// A retrieval hit with the page of the record it points at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PagedHit {
    pub hit: RetrievalHit,
    pub page: PageRef,
}

/// Reciprocal rank of the first hit (within the top 10) on the gold page.
pub fn reciprocal_rank(hits: &[PagedHit], gold: &PageRef) -> (f64, Option<usize>) {
    hits.iter()
        .filter(|h| h.hit.rank >= 1 && h.hit.rank <= MRR_CUTOFF)
        .filter(|h| &h.page == gold)
        .map(|h| h.hit.rank)
        .min()
        .map_or((0.0, None), |rank| (1.0 / rank as f64, Some(rank)))
}

pub fn mrr_at_10(per_query_hits: &[Vec<PagedHit>], golds: &[PageRef]) -> Result<EvalReport, EvalError> {
    if per_query_hits.len() != golds.len() {
        return Err(EvalError::LengthMismatch { hits: per_query_hits.len(), golds: golds.len() });
    }
    let items = per_query_hits
        .iter()
        .zip(golds)
        .enumerate()
        .map(|(index, (hits, gold))| {
            let (value, rank) = reciprocal_rank(hits, gold);
            ItemScore { index, value, rank, matched: Some(rank.is_some()), note: None }
        })
        .collect();
    EvalReport::from_items("mrr@10", items, Vec::new())
}

fn yes_no(token: &str) -> Option<bool> {
    match token.trim().to_lowercase().as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

/// Score from the first generated token: `p_yes` if yes is likelier, `1 - p_no`
/// if no is, 0 when neither appears.
pub fn l3score_from_first_token(first: &TokenLogprob) -> f64 {
    let mut p_yes: f64 = 0.0;
    let mut p_no: f64 = 0.0;
    let candidates = std::iter::once((first.token.as_str(), first.logprob))
        .chain(first.top_alternatives.iter().map(|t| (t.token.as_str(), t.logprob)));
    for (token, logprob) in candidates {
        let p = logprob.exp().clamp(0.0, 1.0);
        match yes_no(token) {
            Some(true) => p_yes = p_yes.max(p),
            Some(false) => p_no = p_no.max(p),
            None => {}
        }
    }
    if p_yes == 0.0 && p_no == 0.0 {
        0.0
    } else if p_yes >= p_no {
        p_yes
    } else {
        1.0 - p_no
    }
}

pub fn judge_prompt(candidate: &str, gold: &str, question: &str) -> String {
    L3SCORE_JUDGE.replace("{question}", question).replace("{gold}", gold).replace("{candidate}", candidate)
}

pub fn l3score(candidate: &str, gold: &str, question: &str, judge: &dyn ChatModel) -> Result<f64, EvalError> {
    let mut request =
        ChatRequest::for_endpoint(judge.endpoint(), vec![Part::text(judge_prompt(candidate, gold, question))]).with_logprobs(5);
    request.max_tokens = request.max_tokens.min(8);
    let response = judge.chat(&request)?;
    let first = response.token_logprobs.as_deref().and_then(<[_]>::first).ok_or(EvalError::JudgeUnsupported)?;
    Ok(l3score_from_first_token(first))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    /// Every rationale of the gold page, in record order.
    #[default]
    GoldPage,
    /// Top-k retrieval over the partition holding the gold page.
    Retrieval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum GenerationMetric {
    #[default]
    Accuracy,
    L3score,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationEvalConfig {
    pub context: ContextMode,
    pub metric: GenerationMetric,
    pub k: usize,
    pub partition_size: usize,
    pub workers: usize,
}

impl Default for GenerationEvalConfig {
    fn default() -> Self {
        Self { context: ContextMode::GoldPage, metric: GenerationMetric::Accuracy, k: 10, partition_size: 25, workers: 4 }
    }
}

pub struct GenerationModels<'a> {
    pub llm: &'a dyn ChatModel,
    /// Needed for `GenerationMetric::L3score`.
    pub judge: Option<&'a dyn ChatModel>,
    /// Needed for `ContextMode::Retrieval`.
    pub embedder: Option<&'a dyn Embedder>,
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, EvalError> {
    rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build().map_err(|e| EvalError::Pool(e.to_string()))
}

enum ItemOutcome {
    Scored(ItemScore),
    Skipped(SkippedItem),
}

fn generate_for(item: &QaItem, store: &RagStore, models: &GenerationModels<'_>, config: &GenerationEvalConfig) -> Result<String, String> {
    match config.context {
        ContextMode::GoldPage => {
            let texts: Vec<&str> = store.records_for_page(&item.gold).map(|r| r.rationale.text.as_str()).collect();
            let prompt = generation_prompt(&item.question, texts);
            let request = ChatRequest::for_endpoint(models.llm.endpoint(), vec![Part::text(prompt)]);
            models.llm.chat(&request).map(|r| r.text).map_err(|e| e.to_string())
        }
        ContextMode::Retrieval => {
            let embedder = models.embedder.ok_or("retrieval context needs an embedder")?;
            let partition = store.partition_containing(&item.gold, config.partition_size).ok_or("gold page not in store")?;
            match answer(&item.question, &partition, config.k, models.llm, embedder) {
                Ok(a) => Ok(a.text),
                Err(AnswerError::AnswerUnavailable { source, .. }) => Err(source.to_string()),
                Err(AnswerError::Retrieval(e)) => Err(e.to_string()),
            }
        }
    }
}

/// Answer every QA item from its gold page's context and score the responses.
/// Items whose gold page is absent from the store are skipped and reported.
pub fn run_generation_eval(
    store: &RagStore,
    items: &[QaItem],
    models: &GenerationModels<'_>,
    config: &GenerationEvalConfig,
) -> Result<EvalReport, EvalError> {
    if config.metric == GenerationMetric::L3score && models.judge.is_none() {
        return Err(EvalError::JudgeUnsupported);
    }
    let pages = store.pages();
    let outcomes: Vec<ItemOutcome> = pool(config.workers)?.install(|| {
        items
            .par_iter()
            .enumerate()
            .map(|(index, item)| {
                if !pages.contains(&item.gold) {
                    return ItemOutcome::Skipped(SkippedItem { index, reason: format!("gold page {} not in store", item.gold) });
                }
                let response = match generate_for(item, store, models, config) {
                    Ok(r) => r,
                    Err(e) => {
                        return ItemOutcome::Scored(ItemScore { index, value: 0.0, rank: None, matched: Some(false), note: Some(e) })
                    }
                };
                match config.metric {
                    GenerationMetric::Accuracy => {
                        let m = exact_match(&response, &item.answers);
                        ItemOutcome::Scored(ItemScore { index, value: f64::from(u8::from(m)), rank: None, matched: Some(m), note: None })
                    }
                    GenerationMetric::L3score => {
                        let judge = models.judge.expect("checked above");
                        let gold = item.answers.join("; ");
                        match l3score(&response, &gold, &item.question, judge) {
                            Ok(v) => ItemOutcome::Scored(ItemScore { index, value: v, rank: None, matched: None, note: None }),
                            Err(e) => ItemOutcome::Scored(ItemScore { index, value: 0.0, rank: None, matched: None, note: Some(e.to_string()) }),
                        }
                    }
                }
            })
            .collect()
    });
    let (scored, skipped) = split(outcomes);
    let metric = match config.metric {
        GenerationMetric::Accuracy => "accuracy",
        GenerationMetric::L3score => "l3score",
    };
    EvalReport::from_items(metric, scored, skipped)
}

fn split(outcomes: Vec<ItemOutcome>) -> (Vec<ItemScore>, Vec<SkippedItem>) {
    let mut scored = Vec::new();
    let mut skipped = Vec::new();
    for o in outcomes {
        match o {
            ItemOutcome::Scored(s) => scored.push(s),
            ItemOutcome::Skipped(s) => skipped.push(s),
        }
    }
    (scored, skipped)
}

/// MRR@k over the partition holding each item's gold page (`partition_size` 0
/// searches the whole store).
pub fn run_retrieval_eval(
    store: &RagStore,
    items: &[QaItem],
    k: usize,
    partition_size: usize,
    embedder: &dyn Embedder,
) -> Result<EvalReport, EvalError> {
    let k = k.clamp(1, MRR_CUTOFF);
    let mut hits_per_query = Vec::new();
    let mut golds = Vec::new();
    let mut indices = Vec::new();
    let mut skipped = Vec::new();
    for (index, item) in items.iter().enumerate() {
        let Some(partition) = store.partition_containing(&item.gold, partition_size) else {
            skipped.push(SkippedItem { index, reason: format!("gold page {} not in store", item.gold) });
            continue;
        };
        let hits = retrieve_top_k(&item.question, &partition, k, embedder)?;
        let paged = hits
            .into_iter()
            .filter_map(|hit| store.page_of(&hit.record_id).cloned().map(|page| PagedHit { hit, page }))
            .collect();
        hits_per_query.push(paged);
        golds.push(item.gold.clone());
        indices.push(index);
    }
    let mut report = mrr_at_10(&hits_per_query, &golds)?;
    for (score, index) in report.per_item.iter_mut().zip(indices) {
        score.index = index;
    }
    report.skipped = skipped;
    Ok(report)
}
