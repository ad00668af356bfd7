//! Python module `tabrag_py`.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use tabrag::eval;
use tabrag::extraction;
use tabrag::prompts;
use tabrag::rationale::{self, Rationale, RationaleMode};
use tabrag::store::{self, HashingEmbedder, StoreError};
use tabrag::types::{self, CellTriple, ComponentLabel, HeaderPath, PageRef, RegionOrigin};

/// `(rank, record_id, score, doc_id, page_index, text)`
type HitRow = (usize, String, f64, String, u32, String);

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn store_err(e: StoreError) -> PyErr {
    match e {
        StoreError::Io(e) => PyIOError::new_err(e.to_string()),
        other => value_err(other),
    }
}

/// Split a column header on " -> " into its levels.
#[pyfunction]
fn parse_header_path(s: &str) -> PyResult<Vec<String>> {
    types::parse_header_path(s).map(|p| p.levels().to_vec()).map_err(value_err)
}

#[pyfunction]
fn serialize_header_path(levels: Vec<String>) -> PyResult<String> {
    HeaderPath::new(levels).map(|p| types::serialize_header_path(&p)).map_err(value_err)
}

/// Repair model output into `(row, column, value)` tuples.
#[pyfunction]
fn parse_cell_triples(raw: &str) -> PyResult<Vec<(String, String, Option<String>)>> {
    let cells = extraction::parse_cell_triples(raw).map_err(value_err)?;
    Ok(cells.into_iter().map(|c| (c.row, c.column, c.value)).collect())
}

#[pyfunction]
fn template_rationale(cells: Vec<(String, String, Option<String>)>) -> String {
    let cells: Vec<CellTriple> = cells.into_iter().map(|(row, column, value)| CellTriple { row, column, value }).collect();
    rationale::template_rationale(&cells)
}

#[pyfunction]
#[pyo3(signature = (text, dims = store::DEFAULT_DIMS))]
fn hashing_embed(text: &str, dims: usize) -> PyResult<Vec<f64>> {
    if dims == 0 {
        return Err(value_err("dims must be positive"));
    }
    Ok(store::hashing_embed(text, dims))
}

#[pyfunction]
fn normalize_answer(s: &str) -> String {
    eval::normalize_answer(s)
}

#[pyfunction]
fn exact_match(response: &str, golds: Vec<String>) -> bool {
    eval::exact_match(response, &golds)
}

/// Mean reciprocal rank from each query's first relevant rank (None when absent).
#[pyfunction]
fn mrr_at_10(first_relevant_ranks: Vec<Option<usize>>) -> PyResult<f64> {
    if first_relevant_ranks.is_empty() {
        return Err(value_err(eval::EvalError::EmptyQuerySet));
    }
    let total: f64 = first_relevant_ranks
        .iter()
        .map(|r| match r {
            Some(r) if (1..=eval::MRR_CUTOFF).contains(r) => 1.0 / *r as f64,
            _ => 0.0,
        })
        .sum();
    Ok(total / first_relevant_ranks.len() as f64)
}

/// Extraction prompt for a component label (`table`, `text`, `title`, `figure`, `list`, `page`).
#[pyfunction]
fn build_prompt(label: &str) -> PyResult<&'static str> {
    let kind = match label {
        "table" => ComponentLabel::Table,
        "text" => ComponentLabel::Text,
        "title" => ComponentLabel::Title,
        "figure" => ComponentLabel::Figure,
        "list" => ComponentLabel::List,
        "page" => ComponentLabel::Page,
        other => return Err(value_err(format!("unknown label {other:?}"))),
    };
    Ok(prompts::build_prompt(kind))
}

#[pyclass(name = "RagStore", frozen)]
struct PyRagStore {
    inner: store::RagStore,
}

#[pymethods]
impl PyRagStore {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        store::RagStore::load(path).map(|inner| Self { inner }).map_err(store_err)
    }

    /// Build a hashing-embedder store from `(record_id, doc_id, page_index, text)` rows.
    #[staticmethod]
    #[pyo3(signature = (rows, dims = store::DEFAULT_DIMS))]
    fn from_texts(rows: Vec<(String, String, u32, String)>, dims: usize) -> PyResult<Self> {
        let rationales = rows
            .into_iter()
            .map(|(id, doc, page, text)| {
                Ok(Rationale {
                    rationale_id: id.clone(),
                    page: PageRef::new(doc, page).map_err(value_err)?,
                    component_id: id,
                    origin: RegionOrigin::Region,
                    text,
                    mode: RationaleMode::Passthrough,
                })
            })
            .collect::<PyResult<Vec<_>>>()?;
        store::build_store(rationales, &HashingEmbedder { dims }).map(|inner| Self { inner }).map_err(store_err)
    }

    fn persist(&self, path: &str) -> PyResult<()> {
        self.inner.persist(path).map_err(store_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dims(&self) -> usize {
        self.inner.dims()
    }

    #[getter]
    fn embedder(&self) -> String {
        self.inner.embedder().to_owned()
    }

    /// Top-k `(rank, record_id, score, doc_id, page_index, text)` with the
    /// hashing embedder the store was built with.
    #[pyo3(signature = (query, k = 10))]
    fn retrieve(&self, query: &str, k: usize) -> PyResult<Vec<HitRow>> {
        let embedder = HashingEmbedder { dims: self.inner.dims() };
        let hits = store::retrieve_top_k(query, &self.inner, k, &embedder).map_err(store_err)?;
        Ok(hits
            .into_iter()
            .filter_map(|h| {
                let r = self.inner.get(&h.record_id)?;
                Some((h.rank, h.record_id, h.score, r.rationale.page.doc_id.clone(), r.rationale.page.page_index, r.rationale.text.clone()))
            })
            .collect())
    }
}

#[pymodule]
fn tabrag_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(parse_header_path, m)?)?;
    m.add_function(wrap_pyfunction!(serialize_header_path, m)?)?;
    m.add_function(wrap_pyfunction!(parse_cell_triples, m)?)?;
    m.add_function(wrap_pyfunction!(template_rationale, m)?)?;
    m.add_function(wrap_pyfunction!(hashing_embed, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_answer, m)?)?;
    m.add_function(wrap_pyfunction!(exact_match, m)?)?;
    m.add_function(wrap_pyfunction!(mrr_at_10, m)?)?;
    m.add_function(wrap_pyfunction!(build_prompt, m)?)?;
    m.add_class::<PyRagStore>()?;
    Ok(())
}
