//! OpenAI-compatible HTTP provider (`/chat/completions`, `/embeddings`).

use serde::Deserialize;
use std::time::Duration;

use super::{ChatRequest, GatewayError, Provider, ProviderChat, Usage};

/// Environment variable holding the API credential.
pub const API_KEY_ENV: &str = "TA_API_KEY";
/// Environment variable overriding the API base URL.
pub const API_BASE_ENV: &str = "TA_API_BASE";
const DEFAULT_BASE: &str = "https://api.openai.com/v1";

pub struct HttpProvider {
    client: reqwest::blocking::Client,
    base_url: String,
    api_key: String,
}

impl HttpProvider {
    /// Build from `TA_API_KEY` / `TA_API_BASE`.
    pub fn from_env() -> Result<Self, GatewayError> {
        let api_key = std::env::var(API_KEY_ENV)
            .map_err(|_| GatewayError::Auth(format!("{API_KEY_ENV} is not set")))?;
        let base_url =
            std::env::var(API_BASE_ENV).unwrap_or_else(|_| DEFAULT_BASE.to_string());
        Ok(Self::new(base_url, api_key))
    }

    pub fn new(base_url: String, api_key: String) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .expect("reqwest client builds");
        Self {
            client,
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key,
        }
    }

    fn post(
        &self,
        path: &str,
        body: &serde_json::Value,
    ) -> Result<serde_json::Value, GatewayError> {
        let url = format!("{}{path}", self.base_url);
        let response = self
            .client
            .post(&url)
            .bearer_auth(&self.api_key)
            .json(body)
            .send()
            .map_err(|e| GatewayError::Transient(format!("transport to {url}: {e}")))?;

        let status = response.status();
        let text = response
            .text()
            .map_err(|e| GatewayError::Transient(format!("reading body from {url}: {e}")))?;

        if status.is_success() {
            return serde_json::from_str(&text)
                .map_err(|e| GatewayError::Provider(format!("invalid JSON from {url}: {e}")));
        }

        let snippet: String = text.chars().take(400).collect();
        match status.as_u16() {
            401 | 403 => Err(GatewayError::Auth(format!("{status}: {snippet}"))),
            429 => Err(GatewayError::Transient(format!("rate limited: {snippet}"))),
            400 if snippet.contains("context_length")
                || snippet.contains("maximum context") =>
            {
                Err(GatewayError::ContextOverflow(snippet))
            }
            s if s >= 500 => Err(GatewayError::Transient(format!("{status}: {snippet}"))),
            _ => Err(GatewayError::Provider(format!("{status}: {snippet}"))),
        }
    }
}

#[derive(Deserialize)]
struct ChatCompletion {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<ApiUsage>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize, Default)]
struct ApiUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[derive(Deserialize)]
struct EmbeddingsResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    index: usize,
    embedding: Vec<f32>,
}

fn parse_chat_payload(raw: serde_json::Value) -> Result<ProviderChat, GatewayError> {
    let parsed: ChatCompletion = serde_json::from_value(raw)
        .map_err(|e| GatewayError::Provider(format!("unexpected completion shape: {e}")))?;
    let text = parsed
        .choices
        .first()
        .and_then(|c| c.message.content.clone())
        .ok_or(GatewayError::EmptyResponse)?;
    let usage = parsed.usage.unwrap_or_default();
    Ok(ProviderChat {
        text,
        usage: Usage {
            input_tokens: usage.prompt_tokens,
            output_tokens: usage.completion_tokens,
        },
    })
}

fn parse_embeddings_payload(raw: serde_json::Value) -> Result<Vec<Vec<f32>>, GatewayError> {
    let parsed: EmbeddingsResponse = serde_json::from_value(raw)
        .map_err(|e| GatewayError::Provider(format!("unexpected embeddings shape: {e}")))?;
    let mut data = parsed.data;
    data.sort_by_key(|d| d.index);
    Ok(data.into_iter().map(|d| d.embedding).collect())
}

impl Provider for HttpProvider {
    fn name(&self) -> &'static str {
        "openai-compatible"
    }

    fn is_network(&self) -> bool {
        true
    }

    fn chat(&self, req: &ChatRequest) -> Result<ProviderChat, GatewayError> {
        let mut body = serde_json::json!({
            "model": req.model_id,
            "temperature": req.temperature,
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": req.user_prompt},
            ],
        });
        if let Some(max) = req.max_output_tokens {
            body["max_tokens"] = serde_json::json!(max);
        }

        let raw = self.post("/chat/completions", &body)?;
        parse_chat_payload(raw)
    }

    fn embed(&self, model_id: &str, texts: &[String]) -> Result<Vec<Vec<f32>>, GatewayError> {
        let body = serde_json::json!({
            "model": model_id,
            "input": texts,
        });
        let raw = self.post("/embeddings", &body)?;
        parse_embeddings_payload(raw)
    }
}
