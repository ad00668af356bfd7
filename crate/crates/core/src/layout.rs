//! Layout detection providers, reading-order grouping and the whole-page fallback.

use std::cmp::Ordering;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::time::Duration;

use image::{DynamicImage, GenericImageView, ImageFormat};
use serde::{Deserialize, Serialize};

use crate::types::{BBox, ComponentLabel, CropRef, LayoutComponent, PageRef};

#[derive(Debug, thiserror::Error)]
pub enum LayoutError {
    /// The provider could not answer; the caller falls back to the page component.
    #[error("layout unavailable for {page}: {reason}")]
    Unavailable { page: String, reason: String },
    #[error("cannot decode page image: {0}")]
    Image(String),
}

/// Decoded page raster plus a reference to its original encoded bytes.
#[derive(Clone)]
pub struct PageImage {
    source: CropRef,
    pixels: DynamicImage,
}

impl std::fmt::Debug for PageImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PageImage")
            .field("source", &self.source)
            .field("width", &self.width())
            .field("height", &self.height())
            .finish()
    }
}

impl PageImage {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, LayoutError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| LayoutError::Image(format!("{}: {e}", path.display())))?;
        let pixels = image::load_from_memory(&bytes).map_err(|e| LayoutError::Image(format!("{}: {e}", path.display())))?;
        Ok(Self { source: CropRef::Path(path.to_path_buf()), pixels })
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self, LayoutError> {
        let pixels = image::load_from_memory(&bytes).map_err(|e| LayoutError::Image(e.to_string()))?;
        Ok(Self { source: CropRef::Bytes(bytes), pixels })
    }

    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }

    pub fn source(&self) -> &CropRef {
        &self.source
    }

    pub fn encoded_bytes(&self) -> std::io::Result<Vec<u8>> {
        self.source.load()
    }

    /// PNG bytes of the region covered by `bbox` (expanded outward to whole pixels).
    pub fn crop_png(&self, bbox: &BBox) -> Result<Vec<u8>, LayoutError> {
        let x0 = bbox.x0.floor().max(0.0) as u32;
        let y0 = bbox.y0.floor().max(0.0) as u32;
        let x1 = (bbox.x1.ceil() as u32).min(self.width());
        let y1 = (bbox.y1.ceil() as u32).min(self.height());
        let view = self.pixels.view(x0, y0, x1.saturating_sub(x0).max(1), y1.saturating_sub(y0).max(1));
        encode_png(&DynamicImage::from(view.to_image()))
    }
}

pub fn encode_png(img: &DynamicImage) -> Result<Vec<u8>, LayoutError> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).map_err(|e| LayoutError::Image(e.to_string()))?;
    Ok(out.into_inner())
}

/// Where layout boxes come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "provider", rename_all = "snake_case")]
pub enum LayoutProvider {
    /// One `{doc_id}_p{page_index}.layout.json` per page.
    PrecomputedFiles { dir: PathBuf },
    HttpService {
        base_url: String,
        #[serde(default = "default_layout_timeout", with = "secs")]
        timeout: Duration,
    },
    /// Always fall back to the whole page.
    None,
}

fn default_layout_timeout() -> Duration {
    Duration::from_secs(60)
}

mod secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

/// Wire shape shared by the precomputed files and the detection service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutFile {
    pub components: Vec<RawComponent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawComponent {
    pub bbox: [f64; 4],
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

pub fn layout_file_name(page: &PageRef) -> String {
    format!("{}.layout.json", page.stem())
}

fn unavailable(page: &PageRef, reason: impl ToString) -> LayoutError {
    LayoutError::Unavailable { page: page.stem(), reason: reason.to_string() }
}

fn fetch_raw(page: &PageRef, image: &PageImage, provider: &LayoutProvider) -> Result<Vec<RawComponent>, LayoutError> {
    match provider {
        LayoutProvider::None => Ok(Vec::new()),
        LayoutProvider::PrecomputedFiles { dir } => {
            let path = dir.join(layout_file_name(page));
            let text = std::fs::read_to_string(&path).map_err(|e| unavailable(page, format!("{}: {e}", path.display())))?;
            let file: LayoutFile =
                serde_json::from_str(&text).map_err(|e| unavailable(page, format!("{}: {e}", path.display())))?;
            Ok(file.components)
        }
        LayoutProvider::HttpService { base_url, timeout } => {
            let bytes = image.encoded_bytes().map_err(|e| unavailable(page, e))?;
            let part = reqwest::blocking::multipart::Part::bytes(bytes)
                .file_name(format!("{}.png", page.stem()))
                .mime_str("image/png")
                .map_err(|e| unavailable(page, e))?;
            let form = reqwest::blocking::multipart::Form::new().part("image", part);
            let client = reqwest::blocking::Client::builder().timeout(*timeout).build().map_err(|e| unavailable(page, e))?;
            let url = format!("{}/detect", base_url.trim_end_matches('/'));
            let resp = client.post(&url).multipart(form).send().map_err(|e| unavailable(page, e))?;
            let status = resp.status();
            if !status.is_success() {
                return Err(unavailable(page, format!("{url} returned {status}")));
            }
            let file: LayoutFile = resp.json().map_err(|e| unavailable(page, e))?;
            Ok(file.components)
        }
    }
}

/// Detect components on one page, clipped to the page and ordered top-to-bottom,
/// left-to-right. Component ids are `{doc_id}_p{page_index}_c{NNN}` in that order.
pub fn detect_layout(page: &PageRef, image: &PageImage, provider: &LayoutProvider) -> Result<Vec<LayoutComponent>, LayoutError> {
    let raw = fetch_raw(page, image, provider)?;
    let (w, h) = (image.width(), image.height());
    let mut boxes: Vec<(BBox, ComponentLabel, f64)> = raw
        .into_iter()
        .filter_map(|r| {
            let [x0, y0, x1, y1] = r.bbox;
            let Some(bbox) = BBox::clip(x0, y0, x1, y1, w, h) else {
                log::warn!("{page}: dropping degenerate box {:?}", r.bbox);
                return None;
            };
            let score = r.score.filter(|s| s.is_finite()).map_or(1.0, |s| s.clamp(0.0, 1.0));
            Some((bbox, ComponentLabel::from_detector(&r.label), score))
        })
        .collect();
    boxes.sort_by(|a, b| {
        reading_order(&a.0, &b.0)
            .then_with(|| a.0.x1.total_cmp(&b.0.x1))
            .then_with(|| a.0.y1.total_cmp(&b.0.y1))
            .then_with(|| a.1.cmp(&b.1))
            .then_with(|| a.2.total_cmp(&b.2))
    });
    boxes
        .into_iter()
        .enumerate()
        .map(|(i, (bbox, label, confidence))| {
            Ok(LayoutComponent {
                component_id: format!("{}_c{i:03}", page.stem()),
                page: page.clone(),
                bbox,
                label,
                confidence,
                crop: CropRef::Bytes(image.crop_png(&bbox)?),
                attached_ids: Vec::new(),
            })
        })
        .collect()
}

fn reading_order(a: &BBox, b: &BBox) -> Ordering {
    a.y0.total_cmp(&b.y0).then_with(|| a.x0.total_cmp(&b.x0))
}

/// Caption/title binding thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupingThresholds {
    /// Largest vertical gap, as a fraction of page height.
    pub max_gap_ratio: f64,
    /// Smallest horizontal overlap, as a fraction of the narrower box.
    pub min_overlap_ratio: f64,
}

impl Default for GroupingThresholds {
    fn default() -> Self {
        Self { max_gap_ratio: 0.03, min_overlap_ratio: 0.5 }
    }
}

/// Vertical distance between two boxes; zero when they overlap vertically.
pub fn vertical_gap(a: &BBox, b: &BBox) -> f64 {
    (a.y0.max(b.y0) - a.y1.min(b.y1)).max(0.0)
}

/// Horizontal overlap width divided by the narrower box's width.
pub fn horizontal_overlap_ratio(a: &BBox, b: &BBox) -> f64 {
    let overlap = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    overlap / a.width().min(b.width())
}

fn is_anchor(label: ComponentLabel) -> bool {
    matches!(label, ComponentLabel::Table | ComponentLabel::Figure)
}

fn is_attachable(label: ComponentLabel) -> bool {
    matches!(label, ComponentLabel::Text | ComponentLabel::Title)
}

pub fn group_components(components: Vec<LayoutComponent>, page_height: u32) -> Vec<LayoutComponent> {
    group_components_with(components, page_height, &GroupingThresholds::default())
}

/// Sort into reading order and bind nearby text/title boxes to the table or
/// figure they caption. Nothing is removed; `attached_ids` is recomputed from
/// scratch so the result depends only on the input set.
pub fn group_components_with(
    mut components: Vec<LayoutComponent>,
    page_height: u32,
    thresholds: &GroupingThresholds,
) -> Vec<LayoutComponent> {
    components.sort_by(|a, b| reading_order(&a.bbox, &b.bbox).then_with(|| a.component_id.cmp(&b.component_id)));
    let max_gap = thresholds.max_gap_ratio * f64::from(page_height);
    let attachments: Vec<Vec<String>> = components
        .iter()
        .map(|anchor| {
            if !is_anchor(anchor.label) {
                return Vec::new();
            }
            let mut ids: Vec<String> = components
                .iter()
                .filter(|c| is_attachable(c.label))
                .filter(|c| {
                    vertical_gap(&c.bbox, &anchor.bbox) <= max_gap
                        && horizontal_overlap_ratio(&c.bbox, &anchor.bbox) >= thresholds.min_overlap_ratio
                })
                .map(|c| c.component_id.clone())
                .collect();
            ids.sort();
            ids
        })
        .collect();
    for (c, ids) in components.iter_mut().zip(attachments) {
        c.attached_ids = ids;
    }
    components
}

/// The whole-page component, emitted for every page.
pub fn fallback_component(page: &PageRef, image: &PageImage) -> LayoutComponent {
    LayoutComponent {
        component_id: format!("{}_page", page.stem()),
        page: page.clone(),
        bbox: BBox::full_page(image.width(), image.height()),
        label: ComponentLabel::Page,
        confidence: 1.0,
        crop: image.source().clone(),
        attached_ids: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    fn page_image(w: u32, h: u32) -> PageImage {
        let img = RgbImage::from_fn(w, h, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, 7]));
        PageImage::from_bytes(encode_png(&DynamicImage::ImageRgb8(img)).unwrap()).unwrap()
    }

    fn comp(id: &str, label: ComponentLabel, b: [f64; 4]) -> LayoutComponent {
        LayoutComponent {
            component_id: id.into(),
            page: PageRef::new("d", 0).unwrap(),
            bbox: BBox::try_from(b).unwrap(),
            label,
            confidence: 1.0,
            crop: CropRef::Bytes(Vec::new()),
            attached_ids: Vec::new(),
        }
    }

    fn write_layout(dir: &Path, page: &PageRef, json: &str) {
        std::fs::write(dir.join(layout_file_name(page)), json).unwrap();
    }

    #[test]
    fn precomputed_table_passes_through() {
        let dir = tempfile::tempdir().unwrap();
        let page = PageRef::new("doc", 3).unwrap();
        write_layout(dir.path(), &page, r#"{"components":[{"bbox":[10,20,110,70],"label":"table","score":0.97}]}"#);
        let img = page_image(200, 100);
        let comps = detect_layout(&page, &img, &LayoutProvider::PrecomputedFiles { dir: dir.path().into() }).unwrap();
        assert_eq!(comps.len(), 1);
        assert_eq!(comps[0].label, ComponentLabel::Table);
        assert_eq!(comps[0].component_id, "doc_p3_c000");
        assert_eq!(comps[0].confidence, 0.97);
        let crop = image::load_from_memory(&comps[0].crop.load().unwrap()).unwrap();
        assert_eq!((crop.width(), crop.height()), (100, 50));
    }

    #[test]
    fn boxes_past_the_edge_are_clipped() {
        let dir = tempfile::tempdir().unwrap();
        let page = PageRef::new("doc", 0).unwrap();
        write_layout(
            dir.path(),
            &page,
            r#"{"components":[{"bbox":[-12.5,40,250,130],"label":"figure"},{"bbox":[300,0,400,10],"label":"text"}]}"#,
        );
        let comps = detect_layout(&page, &page_image(200, 100), &LayoutProvider::PrecomputedFiles { dir: dir.path().into() })
            .unwrap();
        // hand-clipped: x0 -12.5 -> 0, x1 250 -> 200, y1 130 -> 100; the second box lies off-page
        assert_eq!(comps.len(), 1);
        assert_eq!(comps[0].bbox, BBox::new(0.0, 40.0, 200.0, 100.0).unwrap());
        assert_eq!(comps[0].confidence, 1.0);
    }

    #[test]
    fn missing_file_is_unavailable() {
        let dir = tempfile::tempdir().unwrap();
        let page = PageRef::new("doc", 0).unwrap();
        let err = detect_layout(&page, &page_image(10, 10), &LayoutProvider::PrecomputedFiles { dir: dir.path().into() })
            .unwrap_err();
        assert!(matches!(err, LayoutError::Unavailable { .. }));
    }

    #[test]
    fn none_provider_yields_nothing() {
        let page = PageRef::new("doc", 0).unwrap();
        assert!(detect_layout(&page, &page_image(10, 10), &LayoutProvider::None).unwrap().is_empty());
    }

    #[test]
    fn unknown_labels_become_text() {
        let dir = tempfile::tempdir().unwrap();
        let page = PageRef::new("doc", 0).unwrap();
        write_layout(dir.path(), &page, r#"{"components":[{"bbox":[0,0,5,5],"label":"caption"}]}"#);
        let comps = detect_layout(&page, &page_image(10, 10), &LayoutProvider::PrecomputedFiles { dir: dir.path().into() })
            .unwrap();
        assert_eq!(comps[0].label, ComponentLabel::Text);
    }

    #[test]
    fn title_above_table_is_attached() {
        // page height 1000 -> max gap 30px; gap 10, overlap 0.9 of the title width
        let title = comp("t", ComponentLabel::Title, [100.0, 90.0, 300.0, 110.0]);
        let table = comp("tab", ComponentLabel::Table, [120.0, 120.0, 900.0, 400.0]);
        let out = group_components(vec![table, title], 1000);
        assert_eq!(out[0].component_id, "t");
        assert_eq!(out[1].attached_ids, vec!["t".to_string()]);
        assert!(out[0].attached_ids.is_empty());
    }

    #[test]
    fn side_by_side_ties_break_on_x0() {
        let a = comp("a", ComponentLabel::Table, [500.0, 10.0, 600.0, 50.0]);
        let b = comp("b", ComponentLabel::Table, [10.0, 10.0, 100.0, 50.0]);
        let out = group_components(vec![a, b], 100);
        assert_eq!(out[0].component_id, "b");
        assert_eq!(out[1].component_id, "a");
        assert!(group_components(Vec::new(), 100).is_empty());
    }

    #[test]
    fn fallback_spans_the_page() {
        let page = PageRef::new("doc", 2).unwrap();
        let c = fallback_component(&page, &page_image(1000, 800));
        assert_eq!(c.bbox, BBox::new(0.0, 0.0, 1000.0, 800.0).unwrap());
        assert_eq!(c.label, ComponentLabel::Page);
        assert_eq!(c.component_id, "doc_p2_page");
        assert_eq!(c.confidence, 1.0);
    }
}
