//! Vision-model extraction of layout components into structured regions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::gateway::{ChatModel, ChatRequest, GatewayError, Part};
use crate::prompts::build_prompt;
use crate::types::{CellTriple, ComponentLabel, LayoutComponent, PageRef, StructuredRegion};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CellParseError {
    #[error("no JSON array found in model output")]
    NoArrayFound,
    #[error("model output is not valid JSON after repair: {0}")]
    ParseFailure(String),
    #[error("no valid cell triples in model output ({dropped} dropped)")]
    EmptyExtraction { dropped: usize },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExtractionErrorKind {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Cells(#[from] CellParseError),
    #[error("cannot read crop: {0}")]
    Crop(String),
    #[error("model returned empty text")]
    EmptyText,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{component_id}: {kind}")]
pub struct ExtractionError {
    pub component_id: String,
    pub kind: ExtractionErrorKind,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("every extraction on {page} failed, including the page fallback")]
pub struct PageExtractionFailed {
    pub page: PageRef,
    pub failures: Vec<ExtractionError>,
}

/// When the whole-page component is sent to the vision model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum FallbackPolicy {
    /// Every page also gets a page-level extraction.
    #[default]
    Always,
    /// Only when detection found nothing or region extraction broke down.
    OnFailureOnly,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedCells {
    pub cells: Vec<CellTriple>,
    /// Elements rejected for missing keys, wrong types or empty row/column.
    pub dropped: usize,
}

fn strip_fences(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut rest = raw;
    while let Some(pos) = rest.find("```") {
        out.push_str(&rest[..pos]);
        rest = &rest[pos + 3..];
        if rest.get(..4).is_some_and(|tag| tag.eq_ignore_ascii_case("json")) {
            rest = &rest[4..];
        }
    }
    out.push_str(rest);
    out
}

fn triple_from(value: &Value) -> Option<CellTriple> {
    let obj = value.as_object()?;
    let row = obj.get("row")?.as_str()?;
    let column = obj.get("column")?.as_str()?;
    let value = match obj.get("value")? {
        Value::Null => None,
        Value::String(s) => Some(s.clone()),
        _ => return None,
    };
    if obj.len() > 3 {
        let extra: Vec<&String> = obj.keys().filter(|k| !matches!(k.as_str(), "row" | "column" | "value")).collect();
        log::warn!("dropping extra keys {extra:?} from cell ({row:?}, {column:?})");
    }
    if row.is_empty() || column.is_empty() {
        return None;
    }
    Some(CellTriple { row: row.to_owned(), column: column.to_owned(), value })
}

/// Repair and validate a model's cell-triple JSON.
///
/// Repair is limited to removing Markdown fences and slicing from the first `[`
/// to the last `]`. Values that survive validation are kept byte-for-byte.
pub fn parse_cell_triples_detailed(raw: &str) -> Result<ParsedCells, CellParseError> {
    let cleaned = strip_fences(raw);
    let (Some(start), Some(end)) = (cleaned.find('['), cleaned.rfind(']')) else {
        return Err(CellParseError::NoArrayFound);
    };
    if end < start {
        return Err(CellParseError::NoArrayFound);
    }
    let parsed: Value = serde_json::from_str(&cleaned[start..=end]).map_err(|e| CellParseError::ParseFailure(e.to_string()))?;
    let Value::Array(items) = parsed else {
        return Err(CellParseError::ParseFailure("top-level value is not an array".into()));
    };
    let total = items.len();
    let cells: Vec<CellTriple> = items.iter().filter_map(triple_from).collect();
    let dropped = total - cells.len();
    if dropped > 0 {
        log::warn!("dropped {dropped} of {total} cell elements");
    }
    if cells.is_empty() {
        return Err(CellParseError::EmptyExtraction { dropped });
    }
    Ok(ParsedCells { cells, dropped })
}

pub fn parse_cell_triples(raw: &str) -> Result<Vec<CellTriple>, CellParseError> {
    parse_cell_triples_detailed(raw).map(|p| p.cells)
}

fn image_mime(bytes: &[u8]) -> &'static str {
    match image::guess_format(bytes) {
        Ok(image::ImageFormat::Jpeg) => "image/jpeg",
        Ok(image::ImageFormat::WebP) => "image/webp",
        Ok(image::ImageFormat::Gif) => "image/gif",
        _ => "image/png",
    }
}

/// Send one component's crop with its prompt and interpret the reply.
pub fn extract_region(component: &LayoutComponent, vlm: &dyn ChatModel) -> Result<StructuredRegion, ExtractionError> {
    let fail = |kind: ExtractionErrorKind| ExtractionError { component_id: component.component_id.clone(), kind };
    let bytes = component.crop.load().map_err(|e| fail(ExtractionErrorKind::Crop(e.to_string())))?;
    let mime = image_mime(&bytes).to_owned();
    let request = ChatRequest::for_endpoint(
        vlm.endpoint(),
        vec![Part::Image { bytes, mime }, Part::text(build_prompt(component.label))],
    );
    let response = vlm.chat(&request).map_err(|e| fail(e.into()))?;
    if component.label == ComponentLabel::Table {
        let cells = parse_cell_triples(&response.text).map_err(|e| fail(e.into()))?;
        return Ok(StructuredRegion::table(component.component_id.clone(), component.page.clone(), cells));
    }
    let text = response.text.trim();
    if text.is_empty() {
        return Err(fail(ExtractionErrorKind::EmptyText));
    }
    Ok(StructuredRegion::text(component.component_id.clone(), component.page.clone(), component.label, text))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PageExtraction {
    /// Successful regions in reading order, the page region (if any) last.
    pub regions: Vec<StructuredRegion>,
    pub failures: Vec<ExtractionError>,
    pub fallback_used: bool,
}

/// Extract every region of a page and, per `policy`, the whole page.
///
/// Per-region failures are logged and skipped. Under `OnFailureOnly` the page is
/// extracted when there are no regions, when every table region failed, or when
/// every region failed.
pub fn extract_page(
    page: &PageRef,
    regions: &[LayoutComponent],
    page_component: &LayoutComponent,
    vlm: &dyn ChatModel,
    policy: FallbackPolicy,
) -> Result<PageExtraction, PageExtractionFailed> {
    let results: Vec<Result<StructuredRegion, ExtractionError>> = regions.par_iter().map(|c| extract_region(c, vlm)).collect();

    let tables: Vec<bool> = regions
        .iter()
        .zip(&results)
        .filter(|(c, _)| c.label == ComponentLabel::Table)
        .map(|(_, r)| r.is_ok())
        .collect();
    let all_tables_failed = !tables.is_empty() && tables.iter().all(|ok| !ok);
    let all_failed = results.iter().all(Result::is_err);
    let run_fallback = match policy {
        FallbackPolicy::Always => true,
        FallbackPolicy::OnFailureOnly => regions.is_empty() || all_tables_failed || all_failed,
    };

    let mut out = Vec::with_capacity(results.len() + 1);
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(region) => out.push(region),
            Err(e) => {
                log::warn!("region extraction failed: {e}");
                failures.push(e);
            }
        }
    }
    if run_fallback {
        match extract_region(page_component, vlm) {
            Ok(region) => out.push(region),
            Err(e) => {
                log::warn!("page extraction failed: {e}");
                failures.push(e);
            }
        }
    }
    if out.is_empty() {
        return Err(PageExtractionFailed { page: page.clone(), failures });
    }
    Ok(PageExtraction { regions: out, failures, fallback_used: run_fallback })
}
