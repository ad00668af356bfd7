use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::thread;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::wire::{self, WireChatRequest, WireChatResponse, WireEmbedRequest, WireEmbedResponse};
use super::{ChatModel, ChatRequest, ChatResponse, EmbedRequest, EmbedResponse, EndpointConfig, GatewayError, Part};

/// Counting semaphore bounding in-flight requests per endpoint.
struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(n: usize) -> Self {
        Self { free: Mutex::new(n.max(1)), cv: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// Blocking client for one endpoint. Shareable across threads.
pub struct GatewayClient {
    endpoint: EndpointConfig,
    http: reqwest::blocking::Client,
    limiter: Limiter,
    seq: AtomicU64,
}

impl std::fmt::Debug for GatewayClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GatewayClient").field("base_url", &self.endpoint.base_url).field("model", &self.endpoint.model).finish()
    }
}

impl GatewayClient {
    pub fn new(endpoint: EndpointConfig) -> Result<Self, GatewayError> {
        let http = reqwest::blocking::Client::builder().timeout(endpoint.timeout).build().map_err(|e| {
            GatewayError::Transport { request_id: "client-init".into(), reason: e.to_string() }
        })?;
        let limiter = Limiter::new(endpoint.max_concurrency);
        Ok(Self { endpoint, http, limiter, seq: AtomicU64::new(0) })
    }

    pub fn endpoint(&self) -> &EndpointConfig {
        &self.endpoint
    }

    fn next_request_id(&self) -> String {
        format!("{}-{}", self.endpoint.model, self.seq.fetch_add(1, Ordering::Relaxed))
    }

    pub fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let request_id = self.next_request_id();
        for part in request.messages.iter().flat_map(|m| &m.parts) {
            if let Part::Image { bytes, .. } = part {
                if bytes.len() > self.endpoint.max_image_bytes {
                    return Err(GatewayError::ImageTooLarge {
                        request_id,
                        size: bytes.len(),
                        limit: self.endpoint.max_image_bytes,
                    });
                }
            }
        }
        let body = WireChatRequest::from(request);
        let resp: WireChatResponse = self.post_with_retry(&request_id, wire::CHAT_PATH, &body)?;
        resp.into_response().map_err(|reason| GatewayError::MalformedResponse { request_id, reason })
    }

    /// Embeds in batches of at most `embed_batch_size`; callers see one ordered result.
    pub fn embed(&self, request: &EmbedRequest) -> Result<EmbedResponse, GatewayError> {
        let mut vectors = Vec::with_capacity(request.texts.len());
        for chunk in request.texts.chunks(self.endpoint.embed_batch_size.max(1)) {
            let request_id = self.next_request_id();
            let body = WireEmbedRequest { model: self.endpoint.model.clone(), input: chunk.to_vec() };
            let mut resp: WireEmbedResponse = self.post_with_retry(&request_id, wire::EMBED_PATH, &body)?;
            let malformed = |reason: String| GatewayError::MalformedResponse { request_id: request_id.clone(), reason };
            if resp.data.len() != chunk.len() {
                return Err(malformed(format!("expected {} embeddings, got {}", chunk.len(), resp.data.len())));
            }
            resp.data.sort_by_key(|d| d.index);
            if resp.data.iter().enumerate().any(|(i, d)| d.index != i) {
                return Err(malformed("embedding indices are not 0..n".into()));
            }
            vectors.extend(resp.data.into_iter().map(|d| d.embedding));
        }
        if let Some(first) = vectors.first() {
            let dims = first.len();
            if dims == 0 || vectors.iter().any(|v| v.len() != dims) {
                return Err(GatewayError::MalformedResponse {
                    request_id: self.next_request_id(),
                    reason: "embeddings have inconsistent or zero dimension".into(),
                });
            }
        }
        Ok(EmbedResponse { vectors })
    }

    fn post_with_retry<B: Serialize, R: DeserializeOwned>(&self, request_id: &str, path: &str, body: &B) -> Result<R, GatewayError> {
        let attempts = self.endpoint.max_attempts.max(1);
        let mut last = None;
        for attempt in 0..attempts {
            if attempt > 0 {
                let delay = self.endpoint.backoff_base * 2u32.pow(attempt - 1);
                log::warn!("[{request_id}] retrying in {delay:?} after: {}", last.as_ref().map(ToString::to_string).unwrap_or_default());
                thread::sleep(delay);
            }
            match self.post_once(request_id, path, body) {
                Ok(r) => return Ok(r),
                Err(e) if e.is_retriable() => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }

    fn post_once<B: Serialize, R: DeserializeOwned>(&self, request_id: &str, path: &str, body: &B) -> Result<R, GatewayError> {
        let _permit = self.limiter.acquire();
        let url = format!("{}{path}", self.endpoint.base_url.trim_end_matches('/'));
        let mut req = self.http.post(&url).header("x-request-id", request_id).json(body);
        if let Some(key) = &self.endpoint.api_key {
            req = req.bearer_auth(key);
        }
        let transport = |e: reqwest::Error| {
            if e.is_timeout() {
                GatewayError::Timeout { request_id: request_id.to_owned() }
            } else {
                GatewayError::Transport { request_id: request_id.to_owned(), reason: e.to_string() }
            }
        };
        let resp = req.send().map_err(transport)?;
        let status = resp.status();
        let bytes = resp.bytes().map_err(transport)?;
        if !status.is_success() {
            return Err(GatewayError::BadStatus {
                request_id: request_id.to_owned(),
                status: status.as_u16(),
                body: String::from_utf8_lossy(&bytes).chars().take(500).collect(),
            });
        }
        serde_json::from_slice(&bytes)
            .map_err(|e| GatewayError::MalformedResponse { request_id: request_id.to_owned(), reason: e.to_string() })
    }
}

impl ChatModel for GatewayClient {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        GatewayClient::chat(self, request)
    }

    fn endpoint(&self) -> &EndpointConfig {
        &self.endpoint
    }
}
