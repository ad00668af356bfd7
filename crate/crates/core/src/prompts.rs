//! Extraction and rewrite prompts, bundled byte-for-byte from `prompts/`.

use crate::types::ComponentLabel;

pub const TABLE: &str = include_str!("../prompts/table.txt");
pub const TEXT: &str = include_str!("../prompts/text.txt");
pub const TITLE: &str = include_str!("../prompts/title.txt");
pub const FIGURE: &str = include_str!("../prompts/figure.txt");
pub const PAGE: &str = include_str!("../prompts/page.txt");
pub const LLM_TABLE: &str = include_str!("../prompts/llm_table.txt");

/// Judge prompt for answer equivalence; `{question}`, `{gold}` and `{candidate}` are substituted.
pub const L3SCORE_JUDGE: &str = include_str!("../prompts/l3score_judge.txt");

/// The vision-model prompt for a component. Lists use the text prompt.
pub fn build_prompt(kind: ComponentLabel) -> &'static str {
    match kind {
        ComponentLabel::Table => TABLE,
        ComponentLabel::Text | ComponentLabel::List => TEXT,
        ComponentLabel::Title => TITLE,
        ComponentLabel::Figure => FIGURE,
        ComponentLabel::Page => PAGE,
    }
}
