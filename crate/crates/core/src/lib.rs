//! Table-aware retrieval-augmented generation over page images.
//!
//! Pages go through layout detection, vision-model extraction (tables become
//! `(row, column, value)` cells), rewriting into natural-language rationales,
//! and embedding into a [`store::RagStore`]. [`rag::answer`] answers from the
//! top-k rationales; [`eval`] scores answers and retrieval.

pub mod cli;
pub mod config;
pub mod eval;
pub mod extraction;
pub mod gateway;
pub mod layout;
pub mod prompts;
pub mod rag;
pub mod rationale;
pub mod store;
pub mod types;

pub use extraction::{parse_cell_triples, FallbackPolicy};
pub use gateway::{ChatModel, GatewayClient, Role};
pub use rag::{answer, ingest, CorpusManifest};
pub use rationale::{template_rationale, Rationale};
pub use store::{build_store, retrieve_top_k, RagStore};
pub use types::{CellTriple, HeaderPath, PageRef, StructuredRegion};
