//! Deterministic fixture server speaking the gateway protocol.
//!
//! Chat requests are answered with the fixture whose key appears as `FX:<key>` in a
//! text part (longest key wins), else the first conditional fixture whose
//! `text_contains` / `image_sha256` conditions all hold, else the default fixture,
//! else 404. Embeddings use the local hashing embedder. `POST /detect` serves the
//! layout-service contract: configured layouts keyed by image SHA-256, otherwise
//! one full-image `text` component.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::{Multipart, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use tokio::sync::oneshot;

use super::wire::{
    WireAssistantMessage, WireChatRequest, WireChatResponse, WireChoice, WireEmbedRequest, WireEmbedResponse, WireEmbedding,
    WireLogprobs, WireTokenLogprob, CHAT_PATH, EMBED_PATH,
};
use super::{ChatRequest, Part, TokenLogprob};
use crate::layout::{LayoutFile, RawComponent};
use crate::store::{hashing_embed, DEFAULT_DIMS};

#[derive(Debug, thiserror::Error)]
pub enum MockError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid fixtures.json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("fixture {0:?} defined twice")]
    DuplicateFixture(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    #[serde(default)]
    pub body: String,
    /// Reply with the request's own text parts instead of `body`.
    #[serde(default)]
    pub echo: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<Vec<TokenLogprob>>,
    /// Answer this many matching requests with 503 before succeeding.
    #[serde(default)]
    pub fail_first: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_sha256: Option<String>,
}

impl Fixture {
    pub fn body(body: impl Into<String>) -> Self {
        Self { body: body.into(), ..Self::default() }
    }

    pub fn echo() -> Self {
        Self { echo: true, ..Self::default() }
    }

    fn is_conditional(&self) -> bool {
        self.text_contains.is_some() || self.image_sha256.is_some()
    }
}

fn default_dims() -> usize {
    DEFAULT_DIMS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockConfig {
    #[serde(default)]
    pub fixtures: BTreeMap<String, Fixture>,
    #[serde(default)]
    pub default: Option<Fixture>,
    #[serde(default = "default_dims")]
    pub embed_dims: usize,
    /// Layouts returned by `/detect`, keyed by lowercase hex SHA-256 of the image.
    #[serde(default)]
    pub layouts: BTreeMap<String, LayoutFile>,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self { fixtures: BTreeMap::new(), default: None, embed_dims: DEFAULT_DIMS, layouts: BTreeMap::new() }
    }
}

impl MockConfig {
    pub fn with_fixture(mut self, key: impl Into<String>, fixture: Fixture) -> Self {
        self.fixtures.insert(key.into(), fixture);
        self
    }

    pub fn with_default(mut self, fixture: Fixture) -> Self {
        self.default = Some(fixture);
        self
    }

    /// `fixtures.json` (optional) plus one fixture per `<key>.txt`; `default.txt`
    /// sets the default body.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self, MockError> {
        let dir = dir.as_ref();
        let io = |path: &Path, source| MockError::Io { path: path.display().to_string(), source };
        let json_path = dir.join("fixtures.json");
        let mut config = if json_path.exists() {
            serde_json::from_str(&std::fs::read_to_string(&json_path).map_err(|e| io(&json_path, e))?)?
        } else {
            MockConfig::default()
        };
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| io(dir, e))?
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "txt"))
            .collect();
        entries.sort();
        for path in entries {
            let key = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let body = std::fs::read_to_string(&path).map_err(|e| io(&path, e))?;
            let slot = if key == "default" {
                config.default.get_or_insert_with(Fixture::default)
            } else {
                config.fixtures.entry(key.clone()).or_default()
            };
            if !slot.body.is_empty() || slot.echo {
                return Err(MockError::DuplicateFixture(key));
            }
            slot.body = body;
        }
        Ok(config)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

struct MockState {
    config: MockConfig,
    failures: Mutex<HashMap<String, u32>>,
}

impl MockState {
    fn select(&self, req: &ChatRequest) -> Option<(String, &Fixture)> {
        let texts: Vec<&str> = req
            .messages
            .iter()
            .flat_map(|m| &m.parts)
            .filter_map(|p| match p {
                Part::Text(t) => Some(t.as_str()),
                Part::Image { .. } => None,
            })
            .collect();
        let keyed = self
            .config
            .fixtures
            .iter()
            .filter(|(k, _)| {
                let marker = format!("FX:{k}");
                texts.iter().any(|t| t.contains(&marker))
            })
            .max_by_key(|(k, _)| k.len());
        if let Some((k, f)) = keyed {
            return Some((k.clone(), f));
        }
        let image_hashes: Vec<String> = req
            .messages
            .iter()
            .flat_map(|m| &m.parts)
            .filter_map(|p| match p {
                Part::Image { bytes, .. } => Some(sha256_hex(bytes)),
                Part::Text(_) => None,
            })
            .collect();
        let conditional = self.config.fixtures.iter().find(|(_, f)| {
            f.is_conditional()
                && f.text_contains.as_ref().is_none_or(|needle| texts.iter().any(|t| t.contains(needle.as_str())))
                && f.image_sha256.as_ref().is_none_or(|h| image_hashes.iter().any(|x| x.eq_ignore_ascii_case(h)))
        });
        if let Some((k, f)) = conditional {
            return Some((k.clone(), f));
        }
        self.config.default.as_ref().map(|f| ("default".to_string(), f))
    }

    /// True when this request should be answered with an injected 503.
    fn should_fail(&self, key: &str, fixture: &Fixture) -> bool {
        if fixture.fail_first == 0 {
            return false;
        }
        let mut seen = self.failures.lock().unwrap_or_else(|e| e.into_inner());
        let n = seen.entry(key.to_string()).or_insert(0);
        if *n < fixture.fail_first {
            *n += 1;
            true
        } else {
            false
        }
    }
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({"error": {"message": message.into()}}))).into_response()
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({"status": "ok", "mode": "mock"}))
}

async fn chat(State(state): State<Arc<MockState>>, body: Bytes) -> Response {
    let wire: WireChatRequest = match serde_json::from_slice(&body) {
        Ok(w) => w,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let model = wire.model.clone();
    let req = match ChatRequest::try_from(wire) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, e),
    };
    let Some((key, fixture)) = state.select(&req) else {
        return error(StatusCode::NOT_FOUND, "no fixture matches and no default is configured");
    };
    if state.should_fail(&key, fixture) {
        return error(StatusCode::SERVICE_UNAVAILABLE, format!("injected failure for fixture {key}"));
    }
    let text = if fixture.echo {
        req.messages
            .iter()
            .flat_map(|m| &m.parts)
            .filter_map(|p| match p {
                Part::Text(t) => Some(t.as_str()),
                Part::Image { .. } => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    } else {
        fixture.body.clone()
    };
    let logprobs = match (&fixture.logprobs, req.want_logprobs) {
        (Some(table), true) => Some(WireLogprobs {
            content: Some(
                table
                    .iter()
                    .map(|t| WireTokenLogprob { token: t.token.clone(), logprob: t.logprob, top_logprobs: t.top_alternatives.clone() })
                    .collect(),
            ),
        }),
        _ => None,
    };
    let resp = WireChatResponse {
        id: format!("mock-{}", &sha256_hex(&body)[..16]),
        object: "chat.completion".into(),
        model,
        choices: vec![WireChoice {
            index: 0,
            message: WireAssistantMessage { role: "assistant".into(), content: Some(text) },
            logprobs,
            finish_reason: Some("stop".into()),
        }],
    };
    Json(resp).into_response()
}

async fn embeddings(State(state): State<Arc<MockState>>, body: Bytes) -> Response {
    let req: WireEmbedRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let data = req
        .input
        .iter()
        .enumerate()
        .map(|(index, text)| WireEmbedding {
            object: "embedding".into(),
            index,
            embedding: hashing_embed(text, state.config.embed_dims),
        })
        .collect();
    Json(WireEmbedResponse { object: "list".into(), data, model: req.model }).into_response()
}

async fn detect(State(state): State<Arc<MockState>>, mut multipart: Multipart) -> Response {
    let mut image = None;
    loop {
        match multipart.next_field().await {
            Ok(Some(field)) => {
                if field.name() == Some("image") {
                    match field.bytes().await {
                        Ok(b) => image = Some(b),
                        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
                    }
                }
            }
            Ok(None) => break,
            Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
        }
    }
    let Some(bytes) = image.filter(|b| !b.is_empty()) else {
        return error(StatusCode::BAD_REQUEST, "missing image field");
    };
    if let Some(layout) = state.config.layouts.get(&sha256_hex(&bytes)) {
        return Json(layout.clone()).into_response();
    }
    match image::load_from_memory(&bytes) {
        Ok(img) => Json(LayoutFile {
            components: vec![RawComponent {
                bbox: [0.0, 0.0, f64::from(img.width()), f64::from(img.height())],
                label: "text".into(),
                score: Some(1.0),
            }],
        })
        .into_response(),
        Err(e) => error(StatusCode::BAD_REQUEST, format!("undecodable image: {e}")),
    }
}

pub fn router(config: MockConfig) -> Router {
    let state = Arc::new(MockState { config, failures: Mutex::new(HashMap::new()) });
    Router::new()
        .route("/health", get(health))
        .route(CHAT_PATH, post(chat))
        .route(EMBED_PATH, post(embeddings))
        .route("/detect", post(detect))
        .with_state(state)
}

/// A mock server on a background thread; shut down on drop.
pub struct MockServer {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl MockServer {
    /// Bind `127.0.0.1:port` (0 picks a free port) and start serving.
    pub fn start(config: MockConfig, port: u16) -> std::io::Result<Self> {
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
        let listener = rt.block_on(tokio::net::TcpListener::bind(("127.0.0.1", port)))?;
        let addr = listener.local_addr()?;
        let (tx, rx) = oneshot::channel::<()>();
        let app = router(config);
        let thread = std::thread::Builder::new().name("mock-gateway".into()).spawn(move || {
            rt.block_on(async move {
                let serve = axum::serve(listener, app).with_graceful_shutdown(async {
                    let _ = rx.await;
                });
                if let Err(e) = serve.await {
                    log::error!("mock server stopped: {e}");
                }
            });
        })?;
        Ok(Self { addr, shutdown: Some(tx), thread: Some(thread) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Serve in the foreground until Ctrl-C or SIGTERM.
pub fn serve_until_signal(config: MockConfig, port: u16, on_ready: impl FnOnce(SocketAddr)) -> std::io::Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
        on_ready(listener.local_addr()?);
        axum::serve(listener, router(config)).with_graceful_shutdown(shutdown_signal()).await
    })
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    log::info!("shutting down mock gateway");
}
