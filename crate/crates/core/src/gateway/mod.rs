//! Chat and embedding endpoints spoken over a chat-completions style HTTP protocol.
//!
//! [`GatewayClient`] is the blocking client used by the pipeline; [`mock`] serves the
//! same protocol from fixtures so every offline test and demo runs without a model.

mod client;
pub mod mock;
pub mod wire;

use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use client::GatewayClient;

/// The four model roles the pipeline talks to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Vlm,
    Llm,
    Judge,
    Embedder,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Vlm, Role::Llm, Role::Judge, Role::Embedder];

    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Vlm => "vlm",
            Role::Llm => "llm",
            Role::Judge => "judge",
            Role::Embedder => "embedder",
        }
    }

    /// Generation cap per role: 16384 for the vision model, 8192 for the text models.
    pub fn default_max_tokens(&self) -> u32 {
        match self {
            Role::Vlm => 16384,
            Role::Llm | Role::Judge | Role::Embedder => 8192,
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const DEFAULT_TEMPERATURE: f64 = 1.0;

/// Connection and sampling settings for one role.
#[derive(Debug, Clone, PartialEq)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub temperature: f64,
    pub max_tokens: u32,
    pub max_attempts: u32,
    pub backoff_base: Duration,
    pub max_concurrency: usize,
    pub max_image_bytes: usize,
    pub embed_batch_size: usize,
}

impl EndpointConfig {
    pub fn new(role: Role, base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key: None,
            timeout: Duration::from_secs(300),
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: role.default_max_tokens(),
            max_attempts: 3,
            backoff_base: Duration::from_secs(1),
            max_concurrency: 4,
            max_image_bytes: 20 * 1024 * 1024,
            embed_batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Part {
    Text(String),
    Image { bytes: Vec<u8>, mime: String },
}

impl Part {
    pub fn text(s: impl Into<String>) -> Self {
        Part::Text(s.into())
    }

    pub fn png(bytes: Vec<u8>) -> Self {
        Part::Image { bytes, mime: "image/png".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub role: String,
    pub parts: Vec<Part>,
}

impl Message {
    pub fn user(parts: Vec<Part>) -> Self {
        Self { role: "user".into(), parts }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub want_logprobs: bool,
    pub top_logprobs: u32,
}

impl ChatRequest {
    /// A single user message, sampling settings taken from the endpoint.
    pub fn for_endpoint(endpoint: &EndpointConfig, parts: Vec<Part>) -> Self {
        Self {
            model: endpoint.model.clone(),
            messages: vec![Message::user(parts)],
            temperature: endpoint.temperature,
            max_tokens: endpoint.max_tokens,
            want_logprobs: false,
            top_logprobs: 0,
        }
    }

    pub fn with_logprobs(mut self, top: u32) -> Self {
        self.want_logprobs = true;
        self.top_logprobs = top;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
    #[serde(default)]
    pub top_alternatives: Vec<TopLogprob>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub token_logprobs: Option<Vec<TokenLogprob>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbedRequest {
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedResponse {
    pub vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GatewayError {
    #[error("[{request_id}] timed out")]
    Timeout { request_id: String },
    #[error("[{request_id}] endpoint returned {status}: {body}")]
    BadStatus { request_id: String, status: u16, body: String },
    #[error("[{request_id}] malformed response: {reason}")]
    MalformedResponse { request_id: String, reason: String },
    #[error("[{request_id}] transport error: {reason}")]
    Transport { request_id: String, reason: String },
    #[error("[{request_id}] image of {size} bytes exceeds the {limit} byte cap")]
    ImageTooLarge { request_id: String, size: usize, limit: usize },
}

impl GatewayError {
    /// Timeouts, connection failures and 5xx are worth another attempt.
    pub fn is_retriable(&self) -> bool {
        match self {
            GatewayError::Timeout { .. } | GatewayError::Transport { .. } => true,
            GatewayError::BadStatus { status, .. } => *status >= 500,
            GatewayError::MalformedResponse { .. } | GatewayError::ImageTooLarge { .. } => false,
        }
    }

    pub fn request_id(&self) -> &str {
        match self {
            GatewayError::Timeout { request_id }
            | GatewayError::BadStatus { request_id, .. }
            | GatewayError::MalformedResponse { request_id, .. }
            | GatewayError::Transport { request_id, .. }
            | GatewayError::ImageTooLarge { request_id, .. } => request_id,
        }
    }
}

/// Anything that can answer a chat request. Implemented by [`GatewayClient`];
/// tests may supply in-process doubles.
pub trait ChatModel: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError>;

    /// Endpoint settings used to fill sampling fields of new requests.
    fn endpoint(&self) -> &EndpointConfig;
}
