//! Domain types shared by every stage of the pipeline, plus header-path algebra.

use std::fmt;
use std::path::PathBuf;

use base64::Engine;
use serde::{Deserialize, Serialize};

/// Separator between levels of a multi-level column header.
pub const HEADER_SEPARATOR: &str = " -> ";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TypeError {
    #[error("malformed header path {input:?}: {reason}")]
    MalformedHeaderPath { input: String, reason: &'static str },
    #[error("invalid bounding box [{x0}, {y0}, {x1}, {y1}]")]
    InvalidBBox { x0: f64, y0: f64, x1: f64, y1: f64 },
    #[error("page reference needs a non-empty doc_id")]
    EmptyDocId,
}

/// A single page of a corpus document.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PageRef {
    pub doc_id: String,
    pub page_index: u32,
}

impl PageRef {
    pub fn new(doc_id: impl Into<String>, page_index: u32) -> Result<Self, TypeError> {
        let doc_id = doc_id.into();
        if doc_id.is_empty() {
            return Err(TypeError::EmptyDocId);
        }
        Ok(Self { doc_id, page_index })
    }

    /// `{doc_id}_p{page_index}`, the single-page file naming convention.
    pub fn stem(&self) -> String {
        format!("{}_p{}", self.doc_id, self.page_index)
    }
}

impl fmt::Display for PageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.stem())
    }
}

/// Axis-aligned box in page-image pixel coordinates.
///
/// Serialized as `[x0, y0, x1, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, TypeError> {
        let ok = [x0, y0, x1, y1].iter().all(|v| v.is_finite()) && 0.0 <= x0 && x0 < x1 && 0.0 <= y0 && y0 < y1;
        if ok {
            Ok(Self { x0, y0, x1, y1 })
        } else {
            Err(TypeError::InvalidBBox { x0, y0, x1, y1 })
        }
    }

    pub fn full_page(width: u32, height: u32) -> Self {
        Self { x0: 0.0, y0: 0.0, x1: f64::from(width.max(1)), y1: f64::from(height.max(1)) }
    }

    /// Clamp to `[0, width] x [0, height]`. `None` when nothing of positive area remains.
    pub fn clip(x0: f64, y0: f64, x1: f64, y1: f64, width: u32, height: u32) -> Option<Self> {
        let (w, h) = (f64::from(width), f64::from(height));
        let clamp = |v: f64, hi: f64| if v.is_nan() { 0.0 } else { v.clamp(0.0, hi) };
        let (ax, bx) = (x0.min(x1), x0.max(x1));
        let (ay, by) = (y0.min(y1), y0.max(y1));
        BBox::new(clamp(ax, w), clamp(ay, h), clamp(bx, w), clamp(by, h)).ok()
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.x1 <= f64::from(width) && self.y1 <= f64::from(height)
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = TypeError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentLabel {
    Table,
    Text,
    Title,
    Figure,
    List,
    /// Reserved for the whole-page fallback component.
    Page,
}

impl ComponentLabel {
    /// Map a detector label onto the closed label set. Unknown labels become `Text`.
    pub fn from_detector(label: &str) -> Self {
        match label.trim().to_ascii_lowercase().as_str() {
            "table" => Self::Table,
            "title" => Self::Title,
            "figure" => Self::Figure,
            "list" => Self::List,
            _ => Self::Text,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Table => "table",
            Self::Text => "text",
            Self::Title => "title",
            Self::Figure => "figure",
            Self::List => "list",
            Self::Page => "page",
        }
    }
}

impl fmt::Display for ComponentLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where the pixels for a component live.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropRef {
    Path(PathBuf),
    Bytes(#[serde(with = "b64")] Vec<u8>),
}

impl CropRef {
    pub fn load(&self) -> std::io::Result<Vec<u8>> {
        match self {
            CropRef::Path(p) => std::fs::read(p),
            CropRef::Bytes(b) => Ok(b.clone()),
        }
    }
}

impl fmt::Debug for CropRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CropRef::Path(p) => f.debug_tuple("Path").field(p).finish(),
            CropRef::Bytes(b) => write!(f, "Bytes({} bytes)", b.len()),
        }
    }
}

mod b64 {
    use super::*;

    pub fn serialize<S: serde::Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        base64::engine::general_purpose::STANDARD.decode(s).map_err(serde::de::Error::custom)
    }
}

fn default_confidence() -> f64 {
    1.0
}

/// A detected page region: its box, label and cropped pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutComponent {
    pub component_id: String,
    pub page: PageRef,
    pub bbox: BBox,
    pub label: ComponentLabel,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
    pub crop: CropRef,
    /// Captions and titles bound to this component.
    #[serde(default)]
    pub attached_ids: Vec<String>,
}

/// Multi-level column header, e.g. `2024 -> Q1 -> Revenue`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct HeaderPath {
    levels: Vec<String>,
}

impl HeaderPath {
    pub fn new<I, S>(levels: I) -> Result<Self, TypeError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let levels: Vec<String> = levels.into_iter().map(Into::into).collect();
        let joined = levels.join(HEADER_SEPARATOR);
        if levels.is_empty() {
            return Err(malformed(joined, "no levels"));
        }
        if levels.iter().any(String::is_empty) {
            return Err(malformed(joined, "empty level"));
        }
        if levels.iter().any(|l| l.contains(HEADER_SEPARATOR)) {
            return Err(malformed(joined, "level contains the separator"));
        }
        // "x ->" followed by "y" joins to "x -> -> y", which splits elsewhere
        if joined.split(HEADER_SEPARATOR).ne(levels.iter().map(String::as_str)) {
            return Err(malformed(joined, "levels recreate the separator at a boundary"));
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[String] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

fn malformed(input: impl Into<String>, reason: &'static str) -> TypeError {
    TypeError::MalformedHeaderPath { input: input.into(), reason }
}

/// Split on the exact separator `" -> "`; nothing else is touched.
pub fn parse_header_path(s: &str) -> Result<HeaderPath, TypeError> {
    if s.is_empty() {
        return Err(malformed(s, "empty input"));
    }
    let levels: Vec<&str> = s.split(HEADER_SEPARATOR).collect();
    if levels.iter().any(|l| l.is_empty()) {
        return Err(malformed(s, "empty level"));
    }
    Ok(HeaderPath { levels: levels.into_iter().map(str::to_owned).collect() })
}

pub fn serialize_header_path(p: &HeaderPath) -> String {
    p.levels.join(HEADER_SEPARATOR)
}

impl fmt::Display for HeaderPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize_header_path(self))
    }
}

impl std::str::FromStr for HeaderPath {
    type Err = TypeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_header_path(s)
    }
}

/// One table cell as emitted by the extraction model.
///
/// `value` is kept byte-for-byte; `None` only for blank cells.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellTriple {
    pub row: String,
    pub column: String,
    pub value: Option<String>,
}

impl CellTriple {
    pub fn new(row: impl Into<String>, column: impl Into<String>, value: Option<&str>) -> Self {
        Self { row: row.into(), column: column.into(), value: value.map(str::to_owned) }
    }

    /// The column parsed as a header path. Falls back to a single level holding
    /// the raw string when it does not parse (e.g. a dangling separator).
    pub fn header(&self) -> HeaderPath {
        parse_header_path(&self.column).unwrap_or_else(|_| HeaderPath { levels: vec![self.column.clone()] })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionOrigin {
    Region,
    PageFallback,
}

/// Structured representation of one component: cells for tables, text otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredRegion {
    pub component_id: String,
    pub page: PageRef,
    pub kind: ComponentLabel,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cells: Vec<CellTriple>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    pub origin: RegionOrigin,
}

impl StructuredRegion {
    pub fn table(component_id: impl Into<String>, page: PageRef, cells: Vec<CellTriple>) -> Self {
        Self {
            component_id: component_id.into(),
            page,
            kind: ComponentLabel::Table,
            cells,
            text: None,
            origin: RegionOrigin::Region,
        }
    }

    pub fn text(component_id: impl Into<String>, page: PageRef, kind: ComponentLabel, text: impl Into<String>) -> Self {
        let origin = if kind == ComponentLabel::Page { RegionOrigin::PageFallback } else { RegionOrigin::Region };
        Self { component_id: component_id.into(), page, kind, cells: Vec::new(), text: Some(text.into()), origin }
    }

    /// Exactly one of `cells` / `text` is populated, matching `kind`.
    pub fn is_well_formed(&self) -> bool {
        let origin_ok = (self.kind == ComponentLabel::Page) == (self.origin == RegionOrigin::PageFallback);
        let payload_ok = match self.kind {
            ComponentLabel::Table => !self.cells.is_empty() && self.text.is_none(),
            _ => self.cells.is_empty() && self.text.is_some(),
        };
        origin_ok && payload_ok
    }
}
