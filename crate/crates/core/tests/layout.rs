mod common;

use std::time::Duration;

use tabrag::gateway::mock::{sha256_hex, MockConfig, MockServer};
use tabrag::layout::{detect_layout, group_components, layout_file_name, LayoutError, LayoutFile, LayoutProvider, PageImage, RawComponent};
use tabrag::types::{BBox, ComponentLabel, PageRef};

fn layouts() -> Vec<LayoutFile> {
    let c = |bbox: [f64; 4], label: &str, score: f64| RawComponent { bbox, label: label.into(), score: Some(score) };
    vec![
        LayoutFile { components: vec![c([20.0, 60.0, 380.0, 250.0], "table", 0.97), c([20.0, 10.0, 380.0, 52.0], "title", 0.88)] },
        LayoutFile {
            components: vec![
                c([210.0, 20.0, 390.0, 280.0], "figure", 0.7),
                c([10.0, 20.0, 200.0, 140.0], "text", 0.9),
                c([10.0, 150.0, 200.0, 290.0], "list", 0.6),
            ],
        },
        // out-of-bounds and degenerate boxes, an unknown label and a missing score
        LayoutFile {
            components: vec![
                c([-5.0, -5.0, 120.0, 90.0], "caption", 1.4),
                RawComponent { bbox: [50.0, 100.0, 50.0, 200.0], label: "table".into(), score: None },
                RawComponent { bbox: [100.0, 100.0, 500.0, 400.0], label: "table".into(), score: None },
            ],
        },
    ]
}

#[test]
fn http_provider_matches_precomputed_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut mock = MockConfig::default();
    let mut pages = Vec::new();
    for (i, layout) in layouts().into_iter().enumerate() {
        let page = PageRef::new("lay", i as u32).unwrap();
        let png = common::page_png(400, 300, 10 + i as u32);
        let path = dir.path().join(format!("{}.png", page.stem()));
        std::fs::write(&path, &png).unwrap();
        std::fs::write(dir.path().join(layout_file_name(&page)), serde_json::to_string(&layout).unwrap()).unwrap();
        mock.layouts.insert(sha256_hex(&png), layout);
        pages.push((page, path));
    }
    let server = MockServer::start(mock, 0).unwrap();
    let http = LayoutProvider::HttpService { base_url: server.url(), timeout: Duration::from_secs(10) };
    let files = LayoutProvider::PrecomputedFiles { dir: dir.path().to_path_buf() };
    for (page, path) in &pages {
        let image = PageImage::open(path).unwrap();
        let a = detect_layout(page, &image, &http).unwrap();
        let b = detect_layout(page, &image, &files).unwrap();
        assert_eq!(a, b, "{page}");
        assert!(!a.is_empty());
        for c in &a {
            assert!(c.bbox.fits_within(400, 300));
            assert!((0.0..=1.0).contains(&c.confidence));
        }
    }
    let third = detect_layout(&pages[2].0, &PageImage::open(&pages[2].1).unwrap(), &files).unwrap();
    assert_eq!(third.len(), 2);
    assert_eq!(third[0].label, ComponentLabel::Text);
    assert_eq!(third[0].bbox, BBox::new(0.0, 0.0, 120.0, 90.0).unwrap());
    assert_eq!(third[0].confidence, 1.0);
    assert_eq!(third[1].bbox, BBox::new(100.0, 100.0, 400.0, 300.0).unwrap());
}

#[test]
fn stub_detector_returns_the_whole_image() {
    let server = MockServer::start(MockConfig::default(), 0).unwrap();
    let http = LayoutProvider::HttpService { base_url: server.url(), timeout: Duration::from_secs(10) };
    let page = PageRef::new("stub", 0).unwrap();
    let image = PageImage::from_bytes(common::page_png(100, 50, 1)).unwrap();
    let comps = detect_layout(&page, &image, &http).unwrap();
    assert_eq!(comps.len(), 1);
    assert_eq!(comps[0].bbox, BBox::new(0.0, 0.0, 100.0, 50.0).unwrap());
    assert_eq!(comps[0].label, ComponentLabel::Text);
    assert_eq!(comps[0].component_id, "stub_p0_c000");

    let health: serde_json::Value = reqwest::blocking::get(format!("{}/health", server.url())).unwrap().json().unwrap();
    assert_eq!(health["status"], "ok");
}

#[test]
fn unreachable_service_is_unavailable() {
    let http = LayoutProvider::HttpService { base_url: "http://127.0.0.1:9".into(), timeout: Duration::from_millis(500) };
    let page = PageRef::new("x", 0).unwrap();
    let image = PageImage::from_bytes(common::page_png(10, 10, 1)).unwrap();
    assert!(matches!(detect_layout(&page, &image, &http), Err(LayoutError::Unavailable { .. })));
    assert!(detect_layout(&page, &image, &LayoutProvider::None).unwrap().is_empty());
    let missing = LayoutProvider::PrecomputedFiles { dir: "/nonexistent".into() };
    assert!(matches!(detect_layout(&page, &image, &missing), Err(LayoutError::Unavailable { .. })));
}

#[test]
fn grouping_attaches_adjacent_title_to_table() {
    let dir = tempfile::tempdir().unwrap();
    let page = PageRef::new("g", 0).unwrap();
    std::fs::write(dir.path().join(layout_file_name(&page)), serde_json::to_string(&layouts()[0]).unwrap()).unwrap();
    let image = PageImage::from_bytes(common::page_png(400, 300, 2)).unwrap();
    let comps = detect_layout(&page, &image, &LayoutProvider::PrecomputedFiles { dir: dir.path().into() }).unwrap();
    let grouped = group_components(comps, image.height());
    assert_eq!(grouped[0].label, ComponentLabel::Title);
    assert_eq!(grouped[1].label, ComponentLabel::Table);
    assert_eq!(grouped[1].attached_ids, vec![grouped[0].component_id.clone()]);
}
