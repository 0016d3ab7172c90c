//! Backend for services exposing the open chat-completions / embeddings
//! HTTP schema (`POST {endpoint}/chat/completions`, `POST {endpoint}/embeddings`).

use std::collections::BTreeMap;
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::Deserialize;
use serde_json::json;

use super::{ChatRequest, ChatResponse, LlmBackend, LlmError, ProviderConfig, SampleFailure, Usage};

const MAX_BACKOFF_MS: u64 = 30_000;

pub struct HttpBackend {
    client: Client,
    endpoint: String,
    api_key: Option<String>,
    retry_limit: u32,
    backoff_base_ms: u64,
}

#[derive(Deserialize)]
struct ChatBody {
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    model: Option<String>,
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<UsageBody>,
}

#[derive(Deserialize)]
struct Choice {
    #[serde(default)]
    index: Option<u32>,
    message: Option<ChoiceMessage>,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct UsageBody {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[derive(Deserialize)]
struct EmbedBody {
    data: Vec<EmbedItem>,
}

#[derive(Deserialize)]
struct EmbedItem {
    #[serde(default)]
    index: Option<usize>,
    embedding: Vec<f32>,
}

enum Attempt {
    Done(String),
    Retry(String),
    Fail(LlmError),
}

impl HttpBackend {
    pub fn new(config: &ProviderConfig) -> Result<Self, LlmError> {
        let api_key = if config.api_key_env.is_empty() {
            None
        } else {
            Some(std::env::var(&config.api_key_env).map_err(|_| {
                LlmError::Auth(format!(
                    "environment variable {} is not set",
                    config.api_key_env
                ))
            })?)
        };
        let client = Client::builder()
            .timeout(Duration::from_millis(config.request_timeout_ms))
            .build()
            .map_err(|e| LlmError::Config(e.to_string()))?;
        Ok(Self {
            client,
            endpoint: config.endpoint_url.trim_end_matches('/').to_string(),
            api_key,
            retry_limit: config.retry_limit,
            backoff_base_ms: config.backoff_base_ms,
        })
    }

    /// POSTs `body`, retrying transient failures (transport errors, 429, 5xx)
    /// up to `retry_limit` times with exponential backoff. Returns the body
    /// text and the number of attempts made.
    fn post(&self, path: &str, body: &serde_json::Value) -> Result<(String, u32), LlmError> {
        let url = format!("{}/{}", self.endpoint, path);
        let mut last = String::new();
        for attempt in 0..=self.retry_limit {
            if attempt > 0 {
                let wait = self
                    .backoff_base_ms
                    .saturating_mul(1u64 << (attempt - 1).min(16))
                    .min(MAX_BACKOFF_MS);
                std::thread::sleep(Duration::from_millis(wait));
            }
            match self.send_once(&url, body) {
                Attempt::Done(text) => return Ok((text, attempt + 1)),
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(message) => {
                    tracing::debug!("transient failure on {url} (attempt {}): {message}", attempt + 1);
                    last = message;
                }
            }
        }
        Err(LlmError::Transport {
            attempts: self.retry_limit + 1,
            message: last,
        })
    }

    fn send_once(&self, url: &str, body: &serde_json::Value) -> Attempt {
        let mut req = self.client.post(url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = match req.send() {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = resp.status();
        let text = match resp.text() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        if status.is_success() {
            Attempt::Done(text)
        } else if status == StatusCode::UNAUTHORIZED || status == StatusCode::FORBIDDEN {
            Attempt::Fail(LlmError::Auth(format!("{status}: {}", truncate(&text))))
        } else if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
            Attempt::Retry(format!("{status}: {}", truncate(&text)))
        } else {
            Attempt::Fail(LlmError::Provider(format!("{status}: {}", truncate(&text))))
        }
    }
}

fn truncate(s: &str) -> &str {
    match s.char_indices().nth(200) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

impl LlmBackend for HttpBackend {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let body = json!({
            "model": request.model_id,
            "messages": request.messages,
            "temperature": request.temperature,
            "n": request.n_samples,
            "max_tokens": request.max_output_tokens,
        });
        let (text, attempts) = self.post("chat/completions", &body)?;
        let parsed: ChatBody =
            serde_json::from_str(&text).map_err(|e| LlmError::Provider(e.to_string()))?;

        let mut slots: Vec<Option<String>> = vec![None; request.n_samples as usize];
        let mut failures = Vec::new();
        for (pos, choice) in parsed.choices.into_iter().enumerate() {
            let index = choice.index.unwrap_or(pos as u32) as usize;
            if index >= slots.len() {
                continue;
            }
            match choice.message.and_then(|m| m.content) {
                Some(content) => slots[index] = Some(content),
                None => failures.push(SampleFailure {
                    index: index as u32,
                    reason: "choice without content".into(),
                }),
            }
        }
        let mut texts = Vec::new();
        for (i, slot) in slots.into_iter().enumerate() {
            match slot {
                Some(t) => texts.push(t),
                None if !failures.iter().any(|f| f.index as usize == i) => {
                    failures.push(SampleFailure {
                        index: i as u32,
                        reason: "choice missing from response".into(),
                    })
                }
                None => {}
            }
        }
        let mut provider_meta = BTreeMap::new();
        provider_meta.insert("attempts".into(), attempts.to_string());
        if let Some(id) = parsed.id {
            provider_meta.insert("id".into(), id);
        }
        if let Some(model) = parsed.model {
            provider_meta.insert("model".into(), model);
        }
        let usage = parsed
            .usage
            .map(|u| Usage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
            })
            .unwrap_or_default();
        Ok(ChatResponse {
            texts,
            failures,
            usage,
            provider_meta,
        })
    }

    fn embed(&self, texts: &[String], model_id: &str) -> Result<Vec<Vec<f32>>, LlmError> {
        let body = json!({ "model": model_id, "input": texts });
        let (text, _) = self.post("embeddings", &body)?;
        let mut parsed: EmbedBody =
            serde_json::from_str(&text).map_err(|e| LlmError::Provider(e.to_string()))?;
        parsed.data.sort_by_key(|d| d.index.unwrap_or(usize::MAX));
        Ok(parsed.data.into_iter().map(|d| d.embedding).collect())
    }
}
