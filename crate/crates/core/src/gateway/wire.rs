//! JSON bodies for `POST /v1/chat/completions` and `POST /v1/embeddings`.

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{ChatRequest, ChatResponse, Message, Part, TokenLogprob, TopLogprob};

pub const CHAT_PATH: &str = "/v1/chat/completions";
pub const EMBED_PATH: &str = "/v1/embeddings";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireChatRequest {
    pub model: String,
    pub messages: Vec<WireMessage>,
    #[serde(default = "one")]
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub logprobs: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_logprobs: Option<u32>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMessage {
    pub role: String,
    pub content: WireContent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WireContent {
    Text(String),
    Parts(Vec<WirePart>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WirePart {
    Text { text: String },
    ImageUrl { image_url: ImageUrl },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageUrl {
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireChatResponse {
    pub id: String,
    #[serde(default)]
    pub object: String,
    #[serde(default)]
    pub model: String,
    pub choices: Vec<WireChoice>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireChoice {
    #[serde(default)]
    pub index: u32,
    pub message: WireAssistantMessage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<WireLogprobs>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finish_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireAssistantMessage {
    pub role: String,
    pub content: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireLogprobs {
    #[serde(default)]
    pub content: Option<Vec<WireTokenLogprob>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireTokenLogprob {
    pub token: String,
    pub logprob: f64,
    #[serde(default)]
    pub top_logprobs: Vec<TopLogprob>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireEmbedRequest {
    pub model: String,
    pub input: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireEmbedResponse {
    #[serde(default)]
    pub object: String,
    pub data: Vec<WireEmbedding>,
    #[serde(default)]
    pub model: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireEmbedding {
    #[serde(default)]
    pub object: String,
    pub index: usize,
    pub embedding: Vec<f64>,
}

pub fn data_uri(mime: &str, bytes: &[u8]) -> String {
    format!("data:{mime};base64,{}", base64::engine::general_purpose::STANDARD.encode(bytes))
}

/// Decode a `data:<mime>;base64,<payload>` URI.
pub fn parse_data_uri(uri: &str) -> Option<(String, Vec<u8>)> {
    let rest = uri.strip_prefix("data:")?;
    let (meta, payload) = rest.split_once(',')?;
    let mime = meta.strip_suffix(";base64")?;
    let bytes = base64::engine::general_purpose::STANDARD.decode(payload).ok()?;
    Some((mime.to_owned(), bytes))
}

impl From<&ChatRequest> for WireChatRequest {
    fn from(req: &ChatRequest) -> Self {
        let messages = req
            .messages
            .iter()
            .map(|m| WireMessage {
                role: m.role.clone(),
                content: WireContent::Parts(
                    m.parts
                        .iter()
                        .map(|p| match p {
                            Part::Text(text) => WirePart::Text { text: text.clone() },
                            Part::Image { bytes, mime } => WirePart::ImageUrl { image_url: ImageUrl { url: data_uri(mime, bytes) } },
                        })
                        .collect(),
                ),
            })
            .collect();
        WireChatRequest {
            model: req.model.clone(),
            messages,
            temperature: req.temperature,
            max_tokens: Some(req.max_tokens),
            logprobs: req.want_logprobs,
            top_logprobs: req.want_logprobs.then_some(req.top_logprobs),
        }
    }
}

impl TryFrom<WireChatRequest> for ChatRequest {
    type Error = String;

    fn try_from(w: WireChatRequest) -> Result<Self, Self::Error> {
        let mut messages = Vec::with_capacity(w.messages.len());
        for m in w.messages {
            let parts = match m.content {
                WireContent::Text(t) => vec![Part::Text(t)],
                WireContent::Parts(parts) => parts
                    .into_iter()
                    .map(|p| match p {
                        WirePart::Text { text } => Ok(Part::Text(text)),
                        WirePart::ImageUrl { image_url } => parse_data_uri(&image_url.url)
                            .map(|(mime, bytes)| Part::Image { bytes, mime })
                            .ok_or_else(|| "image_url is not a base64 data URI".to_string()),
                    })
                    .collect::<Result<_, _>>()?,
            };
            messages.push(Message { role: m.role, parts });
        }
        Ok(ChatRequest {
            model: w.model,
            messages,
            temperature: w.temperature,
            max_tokens: w.max_tokens.unwrap_or(0),
            want_logprobs: w.logprobs,
            top_logprobs: w.top_logprobs.unwrap_or(0),
        })
    }
}

impl WireChatResponse {
    pub fn into_response(self) -> Result<ChatResponse, String> {
        let choice = self.choices.into_iter().next().ok_or("no choices in response")?;
        let text = choice.message.content.ok_or("choice has no content")?;
        let token_logprobs = choice.logprobs.and_then(|l| l.content).map(|tokens| {
            tokens
                .into_iter()
                .map(|t| TokenLogprob { token: t.token, logprob: t.logprob, top_alternatives: t.top_logprobs })
                .collect()
        });
        Ok(ChatResponse { text, token_logprobs })
    }
}
