//! Rewrites structured regions into natural-language rationales for embedding.
//!
//! Tables go through either the LLM rewrite prompt or the deterministic templater;
//! the templater also validates and backs up the LLM output. Non-table regions are
//! already prose and pass through unchanged.

use serde::{Deserialize, Serialize};

use crate::gateway::{ChatModel, ChatRequest, Part};
use crate::prompts;
use crate::types::{CellTriple, ComponentLabel, PageRef, RegionOrigin, StructuredRegion};

/// How a rationale's text was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RationaleMode {
    Template,
    Model,
    Passthrough,
}

impl RationaleMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            RationaleMode::Template => "template",
            RationaleMode::Model => "model",
            RationaleMode::Passthrough => "passthrough",
        }
    }
}

/// How table regions should be rewritten.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TableRewrite {
    Template,
    #[default]
    Model,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rationale {
    pub rationale_id: String,
    pub page: PageRef,
    pub component_id: String,
    pub origin: RegionOrigin,
    pub text: String,
    pub mode: RationaleMode,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RationaleError {
    #[error("region {0} has nothing to describe")]
    EmptyRegion(String),
}

const MISSING_VALUE: &str = "not specified";

/// Split a lone header like `2019 $ million` into its leading year and the rest.
fn split_leading_year(header: &str) -> Option<(&str, &str)> {
    let (first, rest) = header.split_once(' ')?;
    let rest = rest.trim_start();
    (first.len() == 4 && first.bytes().all(|b| b.is_ascii_digit()) && !rest.is_empty()).then_some((first, rest))
}

/// One sentence for one cell.
pub fn template_line(cell: &CellTriple) -> String {
    let header = cell.header();
    let levels: Vec<&str> = match header.levels() {
        [only] => match split_leading_year(only) {
            Some((year, rest)) => vec![year, rest],
            None => vec![only.as_str()],
        },
        many => many.iter().map(String::as_str).collect(),
    };
    let value = cell.value.as_deref().unwrap_or(MISSING_VALUE);
    let last = levels[levels.len() - 1];
    let verb = if last.to_lowercase().ends_with('s') { "are" } else { "is" };
    let row = &cell.row;
    match levels.as_slice() {
        [l1] => format!("The {row} {l1} {verb} {value}."),
        [l1, l2] => format!("In {l1}, the {row} {l2} {verb} {value}."),
        [l1, l2, middle @ .., ln] => {
            let mut clause = format!("In {l2} of {l1}");
            for level in middle {
                clause.push_str(", ");
                clause.push_str(level);
            }
            format!("{clause}, the {row} {ln} {verb} {value}.")
        }
        [] => unreachable!("header paths have at least one level"),
    }
}

/// One line per cell, in input order.
pub fn template_rationale(cells: &[CellTriple]) -> String {
    cells.iter().map(template_line).collect::<Vec<_>>().join("\n")
}

/// Serialized model input: `{"cells":[...]}`.
pub fn cells_payload(cells: &[CellTriple]) -> String {
    #[derive(Serialize)]
    struct Payload<'a> {
        cells: &'a [CellTriple],
    }
    serde_json::to_string(&Payload { cells }).expect("cells serialize")
}

/// Accept the model's rewrite only if it has one line per cell and each line
/// carries its cell's value.
pub fn validate_model_output(cells: &[CellTriple], output: &str) -> Option<String> {
    let lines: Vec<&str> = output.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    if lines.len() != cells.len() {
        return None;
    }
    let all_present = cells.iter().zip(&lines).all(|(cell, line)| match cell.value.as_deref() {
        Some(v) if !v.is_empty() => line.contains(v),
        _ => true,
    });
    all_present.then(|| lines.join("\n"))
}

pub fn rationalize(region: &StructuredRegion, llm: Option<&dyn ChatModel>, rewrite: TableRewrite) -> Result<Rationale, RationaleError> {
    let make = |text: String, mode| Rationale {
        rationale_id: region.component_id.clone(),
        page: region.page.clone(),
        component_id: region.component_id.clone(),
        origin: region.origin,
        text,
        mode,
    };
    if region.kind != ComponentLabel::Table {
        return match region.text.as_deref().map(str::trim) {
            Some(t) if !t.is_empty() => Ok(make(t.to_string(), RationaleMode::Passthrough)),
            _ => Err(RationaleError::EmptyRegion(region.component_id.clone())),
        };
    }
    if region.cells.is_empty() {
        return Err(RationaleError::EmptyRegion(region.component_id.clone()));
    }
    if let (TableRewrite::Model, Some(llm)) = (rewrite, llm) {
        let request = ChatRequest::for_endpoint(
            llm.endpoint(),
            vec![Part::text(prompts::LLM_TABLE), Part::text(cells_payload(&region.cells))],
        );
        match llm.chat(&request) {
            Ok(resp) => match validate_model_output(&region.cells, &resp.text) {
                Some(text) => return Ok(make(text, RationaleMode::Model)),
                None => log::warn!("{}: model rewrite failed validation, using template", region.component_id),
            },
            Err(e) => log::warn!("{}: model rewrite unavailable ({e}), using template", region.component_id),
        }
    }
    Ok(make(template_rationale(&region.cells), RationaleMode::Template))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cell(r: &str, c: &str, v: &str) -> CellTriple {
        CellTriple::new(r, c, Some(v))
    }

    #[test]
    fn header_depths() {
        assert_eq!(template_line(&cell("Sales", "2024 -> Q1 -> Revenue", "1,000")), "In Q1 of 2024, the Sales Revenue is 1,000.");
        assert_eq!(template_line(&cell("Sales", "Notes", "N/A")), "The Sales Notes are N/A.");
        assert_eq!(template_line(&cell("Cost", "2023 -> Profit", "(90)")), "In 2023, the Cost Profit is (90).");
        assert_eq!(
            template_line(&cell("Sales", "2024 -> Q1 -> East -> Units", "5")),
            "In Q1 of 2024, East, the Sales Units are 5."
        );
    }

    #[test]
    fn payload_keeps_field_order() {
        assert_eq!(
            cells_payload(&[CellTriple::new("Sales", "2024 -> Q1", None)]),
            r#"{"cells":[{"row":"Sales","column":"2024 -> Q1","value":null}]}"#
        );
    }

    #[test]
    fn blank_cell_is_not_specified() {
        assert_eq!(template_line(&CellTriple::new("A", "B", None)), "The A B is not specified.");
    }

    #[test]
    fn leading_year_single_header_reads_as_year_clause() {
        assert_eq!(
            template_line(&cell("Non-current assets", "2019 $ million", "196.9")),
            "In 2019, the Non-current assets $ million is 196.9."
        );
        assert_eq!(template_line(&cell("A", "20190 x", "1")), "The A 20190 x is 1.");
    }

    #[test]
    fn text_regions_pass_through() {
        let region = StructuredRegion::text("d_p0_c001", PageRef::new("d", 0).unwrap(), ComponentLabel::Text, "Quarterly report.");
        let r = rationalize(&region, None, TableRewrite::Model).unwrap();
        assert_eq!(r.text, "Quarterly report.");
        assert_eq!(r.mode, RationaleMode::Passthrough);
        assert_eq!(r.origin, RegionOrigin::Region);
    }

    #[test]
    fn validation_requires_line_per_cell_with_value() {
        let cells = vec![cell("A", "X", "1"), cell("B", "X", "(2)")];
        assert_eq!(validate_model_output(&cells, "A X is 1.\n\nB X is (2).\n").as_deref(), Some("A X is 1.\nB X is (2)."));
        assert!(validate_model_output(&cells, "A X is 1.").is_none());
        assert!(validate_model_output(&cells, "A X is 1.\nB X is 2.").is_none());
    }

    fn word() -> impl Strategy<Value = String> {
        "[A-Z][a-z]{1,8}".prop_filter("no table words", |w| {
            let l = w.to_lowercase();
            !["row", "column", "cell"].iter().any(|t| l.contains(t))
        })
    }

    proptest! {
        #[test]
        fn template_invariants(rows in proptest::collection::vec((word(), proptest::collection::vec(word(), 1..5), proptest::option::of("[0-9,().%-]{1,8}")), 1..20)) {
            let cells: Vec<CellTriple> = rows
                .iter()
                .map(|(r, levels, v)| CellTriple { row: r.clone(), column: levels.join(" -> "), value: v.clone() })
                .collect();
            let text = template_rationale(&cells);
            let lines: Vec<&str> = text.split('\n').collect();
            prop_assert_eq!(lines.len(), cells.len());
            for (line, c) in lines.iter().zip(&cells) {
                prop_assert!(line.contains(c.value.as_deref().unwrap_or("not specified")));
                let lower = line.to_lowercase();
                for term in ["row", "column", "cell"] {
                    prop_assert!(!lower.split(|ch: char| !ch.is_alphanumeric()).any(|t| t == term));
                }
            }
            prop_assert_eq!(template_rationale(&cells), text);
        }
    }
}
