#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use image::{DynamicImage, Rgb, RgbImage};
use serde_json::json;
use tabrag::gateway::mock::{sha256_hex, Fixture, MockConfig};
use tabrag::gateway::{ChatModel, ChatRequest, ChatResponse, EndpointConfig, GatewayError, Part, Role};
use tabrag::layout::{encode_png, layout_file_name, LayoutFile, PageImage, RawComponent};
use tabrag::rationale::{rationalize, Rationale, TableRewrite};
use tabrag::types::{BBox, CellTriple, PageRef, StructuredRegion};

/// PNG of a page with a solid background and a darker band per `seed`, so every
/// page and every crop hashes differently.
pub fn page_png(width: u32, height: u32, seed: u32) -> Vec<u8> {
    let base = [(40 + seed * 37) % 256, (90 + seed * 53) % 256, (160 + seed * 71) % 256].map(|c| c as u8);
    let img = RgbImage::from_fn(width, height, |x, y| {
        if (x + y * 3 + seed).is_multiple_of(17) {
            Rgb([base[0] / 2, base[1] / 2, base[2] / 2])
        } else {
            Rgb(base)
        }
    });
    encode_png(&DynamicImage::ImageRgb8(img)).expect("png encodes")
}

/// Answers with a closure of the request; counts calls.
pub struct ScriptedModel<F> {
    pub endpoint: EndpointConfig,
    pub respond: F,
    pub calls: Mutex<usize>,
}

impl<F> ScriptedModel<F>
where
    F: Fn(&ChatRequest) -> Result<ChatResponse, GatewayError> + Send + Sync,
{
    pub fn new(role: Role, respond: F) -> Self {
        Self { endpoint: EndpointConfig::new(role, "http://scripted.invalid", "scripted"), respond, calls: Mutex::new(0) }
    }

    pub fn calls(&self) -> usize {
        *self.calls.lock().unwrap()
    }
}

impl<F> ChatModel for ScriptedModel<F>
where
    F: Fn(&ChatRequest) -> Result<ChatResponse, GatewayError> + Send + Sync,
{
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        *self.calls.lock().unwrap() += 1;
        (self.respond)(request)
    }

    fn endpoint(&self) -> &EndpointConfig {
        &self.endpoint
    }
}

pub fn reply(text: impl Into<String>) -> Result<ChatResponse, GatewayError> {
    Ok(ChatResponse { text: text.into(), token_logprobs: None })
}

pub fn request_text(req: &ChatRequest) -> String {
    req.messages
        .iter()
        .flat_map(|m| &m.parts)
        .filter_map(|p| match p {
            Part::Text(t) => Some(t.as_str()),
            Part::Image { .. } => None,
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// The fenced VLM table output used as the repair example.
pub const FENCED_TABLE_OUTPUT: &str = r#"```json
[
    {"row": "Non-current assets", "column": "2019 $ million", "value": "196.9"},
    {"row": "Non-current assets", "column": "2018 $ million", "value": "184.6"},
    {"row": "Americas", "column": "2019 $ million", "value": "7.4"},
    {"row": "Asia Pacific", "column": "2019 $ million", "value": "11.5"},
    {"row": "Europe, Middle East and Africa", "column": "2019 $ million", "value": "215.8"},
    {"row": "Non-current assets", "column": "2018 $ million", "value": "4.4"},
    {"row": "Americas", "column": "2018 $ million", "value": "5.1"},
    {"row": "Asia Pacific", "column": "2018 $ million", "value": "194.1"}
]
```"#;

pub const FENCED_TABLE_VALUES: [&str; 8] = ["196.9", "184.6", "7.4", "11.5", "215.8", "4.4", "5.1", "194.1"];

/// The 16 cells of the rewrite prompt's worked example and its 16 sentences.
pub fn rewrite_example() -> (Vec<CellTriple>, Vec<&'static str>) {
    let cells = [
        ("Sales", "2024 -> Q1 -> Revenue", "1,000"),
        ("Sales", "2024 -> Q1 -> Profit", "300"),
        ("Sales", "2024 -> Q2 -> Revenue", "900"),
        ("Sales", "2024 -> Q2 -> Profit", "250"),
        ("Sales", "2023 -> Revenue", "1,700"),
        ("Sales", "2023 -> Profit", "550"),
        ("Sales", "Growth %", "12%"),
        ("Sales", "Notes", "N/A"),
        ("Cost", "2024 -> Q1 -> Revenue", "(200)"),
        ("Cost", "2024 -> Q1 -> Profit", "(50)"),
        ("Cost", "2024 -> Q2 -> Revenue", "-180"),
        ("Cost", "2024 -> Q2 -> Profit", "-40"),
        ("Cost", "2023 -> Revenue", "(380)"),
        ("Cost", "2023 -> Profit", "(90)"),
        ("Cost", "Growth %", "N/A"),
        ("Cost", "Notes", "Adjusted"),
    ]
    .iter()
    .map(|(r, c, v)| CellTriple::new(*r, *c, Some(v)))
    .collect();
    let lines = vec![
        "In Q1 of 2024, the Sales Revenue is 1,000.",
        "In Q1 of 2024, the Sales Profit is 300.",
        "In Q2 of 2024, the Sales Revenue is 900.",
        "In Q2 of 2024, the Sales Profit is 250.",
        "In 2023, the Sales Revenue is 1,700.",
        "In 2023, the Sales Profit is 550.",
        "The Sales Growth % is 12%.",
        "The Sales Notes are N/A.",
        "In Q1 of 2024, the Cost Revenue is (200).",
        "In Q1 of 2024, the Cost Profit is (50).",
        "In Q2 of 2024, the Cost Revenue is -180.",
        "In Q2 of 2024, the Cost Profit is -40.",
        "In 2023, the Cost Revenue is (380).",
        "In 2023, the Cost Profit is (90).",
        "The Cost Growth % is N/A.",
        "The Cost Notes are Adjusted.",
    ];
    (cells, lines)
}

/// splitmix64; enough for reproducible synthetic corpora.
pub struct SplitMix(pub u64);

impl SplitMix {
    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    pub fn shuffle<T>(&mut self, v: &mut [T]) {
        for i in (1..v.len()).rev() {
            v.swap(i, self.below(i + 1));
        }
    }

    pub fn word(&mut self, len: usize) -> String {
        (0..len).map(|_| (b'a' + self.below(26) as u8) as char).collect()
    }
}

pub struct SyntheticTable {
    pub page: PageRef,
    pub cells: Vec<CellTriple>,
    pub rationale: Rationale,
}

/// `n` tables, each with its own row and column vocabulary, rewritten with the
/// template. One rationale per table on page `syn{t}` page 0.
pub fn synthetic_tables(n: usize, seed: u64) -> Vec<SyntheticTable> {
    let mut rng = SplitMix(seed);
    (0..n)
        .map(|t| {
            let page = PageRef::new(format!("syn{t:02}"), 0).unwrap();
            let rows: Vec<String> = (0..3).map(|_| format!("{} {}", rng.word(7), rng.word(6))).collect();
            let metrics: Vec<String> = (0..2).map(|_| rng.word(8)).collect();
            let mut cells = Vec::new();
            for row in &rows {
                for (j, metric) in metrics.iter().enumerate() {
                    let year = 2015 + (t + j) % 10;
                    let value = format!("{}.{}", 10 + rng.below(990), rng.below(10));
                    cells.push(CellTriple::new(row.clone(), format!("{year} -> {metric}"), Some(&value)));
                }
            }
            let region = StructuredRegion::table(format!("{}_c000", page.stem()), page.clone(), cells.clone());
            let rationale = rationalize(&region, None, TableRewrite::Template).unwrap();
            SyntheticTable { page, cells, rationale }
        })
        .collect()
}

pub struct FixtureCorpus {
    pub dir: PathBuf,
    pub manifest: PathBuf,
    pub layouts: PathBuf,
    pub qa: PathBuf,
    pub mock: MockConfig,
    pub pages: Vec<PageRef>,
    /// (question, gold value) per page.
    pub questions: Vec<(String, String)>,
}

pub const PAGE_W: u32 = 400;
pub const PAGE_H: u32 = 300;
pub const TITLE_BOX: [f64; 4] = [20.0, 10.0, 380.0, 45.0];
pub const TABLE_BOX: [f64; 4] = [20.0, 50.0, 380.0, 250.0];
const MINERALS: [&str; 5] = ["Zircon", "Quartz", "Basalt", "Garnet", "Feldspar"];

/// `n` (≤ 5) one-table pages with precomputed layouts, a QA file and mock
/// fixtures: VLM table replies keyed by crop hash, rewrites keyed by the cell
/// payload, page summaries keyed by page hash, everything else echoed.
pub fn fixture_corpus(dir: &Path, n: usize) -> FixtureCorpus {
    assert!(n <= MINERALS.len());
    let layouts = dir.join("layouts");
    std::fs::create_dir_all(&layouts).unwrap();
    let mut mock = MockConfig::default()
        .with_default(Fixture::echo())
        .with_fixture("title", Fixture { text_contains: Some("**title text**".into()), ..Fixture::body("Mineral Holdings Report") });
    let mut manifest_pages = Vec::new();
    let mut qa = String::new();
    let mut pages = Vec::new();
    let mut questions = Vec::new();
    for (i, mineral) in MINERALS.iter().take(n).enumerate() {
        let page = PageRef::new(format!("report{i}"), 0).unwrap();
        let png = page_png(PAGE_W, PAGE_H, i as u32 + 1);
        let image_path = dir.join(format!("{}.png", page.stem()));
        std::fs::write(&image_path, &png).unwrap();
        let layout = LayoutFile {
            components: vec![
                RawComponent { bbox: TABLE_BOX, label: "table".into(), score: Some(0.98) },
                RawComponent { bbox: TITLE_BOX, label: "title".into(), score: Some(0.91) },
            ],
        };
        std::fs::write(layouts.join(layout_file_name(&page)), serde_json::to_string(&layout).unwrap()).unwrap();

        let image = PageImage::from_bytes(png.clone()).unwrap();
        let [x0, y0, x1, y1] = TABLE_BOX;
        let crop = image.crop_png(&BBox::new(x0, y0, x1, y1).unwrap()).unwrap();
        let v2019 = format!("{}.{}", 100 + 17 * i, 3 + i);
        let v2018 = format!("{}.{}", 90 + 13 * i, 1 + i);
        let cells = json!([
            {"row": mineral, "column": "2019 $ million", "value": v2019},
            {"row": mineral, "column": "2018 $ million", "value": v2018},
        ]);
        mock = mock
            .with_fixture(
                format!("table_p{i}"),
                Fixture { image_sha256: Some(sha256_hex(&crop)), ..Fixture::body(format!("```json\n{cells:#}\n```")) },
            )
            .with_fixture(
                format!("rewrite_p{i}"),
                Fixture {
                    text_contains: Some(format!("{{\"cells\":[{{\"row\":\"{mineral}\",")),
                    ..Fixture::body(format!(
                        "In 2019 the {mineral} holdings were worth {v2019} $ million.\nIn 2018 the {mineral} holdings were worth {v2018} $ million."
                    ))
                },
            )
            .with_fixture(
                format!("page_p{i}"),
                Fixture {
                    image_sha256: Some(sha256_hex(&png)),
                    ..Fixture::body(format!("Mineral Holdings Report. {mineral} holdings: {v2019} (2019), {v2018} (2018)."))
                },
            );
        manifest_pages.push(json!({"doc_id": page.doc_id, "page_index": 0, "image": format!("{}.png", page.stem())}));
        let question = format!("What were the {mineral} holdings worth in 2019?");
        qa.push_str(&serde_json::to_string(&json!({"question": question, "answers": [v2019], "doc_id": page.doc_id, "page_index": 0})).unwrap());
        qa.push('\n');
        pages.push(page);
        questions.push((question, v2019));
    }
    let manifest = dir.join("manifest.json");
    std::fs::write(&manifest, serde_json::to_string_pretty(&json!({ "pages": manifest_pages })).unwrap()).unwrap();
    let qa_path = dir.join("qa.jsonl");
    std::fs::write(&qa_path, qa).unwrap();
    FixtureCorpus { dir: dir.to_path_buf(), manifest, layouts, qa: qa_path, mock, pages, questions }
}

/// Config pointing every chat role at `url` with fast retries.
pub fn write_config(dir: &Path, url: &str, layouts: &Path) -> PathBuf {
    let mut toml = String::new();
    for role in ["vlm", "llm", "judge", "embedder"] {
        toml.push_str(&format!(
            "[endpoints.{role}]\nbase_url = \"{url}\"\nmodel = \"mock-{role}\"\nmax_attempts = 2\nbackoff_secs = 0.01\ntimeout_secs = 10\n\n"
        ));
    }
    toml.push_str(&format!("[layout]\nprovider = \"precomputed\"\ndir = \"{}\"\n\n[pipeline]\nworkers = 4\n", layouts.display()));
    let path = dir.join("tabrag.toml");
    std::fs::write(&path, toml).unwrap();
    path
}
