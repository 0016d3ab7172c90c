//! Uniform access to chat-completion and embedding backends.
//!
//! A [`Gateway`] wraps one [`LlmBackend`] (remote HTTP service or scripted
//! mock) and adds the in-flight limiter, the temperature-0 response cache and
//! the append-only request log. Gateways are `Sync` and meant to be shared by
//! all workers of a stage.

mod http;
mod mock;
mod pool;
mod synthetic;

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

pub use http::HttpBackend;
pub use mock::{hashed_embedding, install_mock, MockBackend, MockScript, Responder};
pub use pool::{ModelPool, PoolMember};
pub use synthetic::SyntheticResponder;

use crate::text::sha256_hex;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("malformed provider response: {0}")]
    Provider(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("provider configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub n_samples: u32,
    pub max_output_tokens: u32,
    pub model_id: String,
}

impl ChatRequest {
    /// A single-user-message request with one sample at temperature 0.
    pub fn user(model_id: impl Into<String>, prompt: impl Into<String>) -> Self {
        Self {
            messages: vec![Message::user(prompt)],
            temperature: 0.0,
            n_samples: 1,
            max_output_tokens: 4096,
            model_id: model_id.into(),
        }
    }

    pub fn with_sampling(mut self, temperature: f64, n_samples: u32) -> Self {
        self.temperature = temperature;
        self.n_samples = n_samples;
        self
    }

    /// The text of the last user message, which is where every prompt builder
    /// in this crate puts its content.
    pub fn prompt(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.messages.is_empty() {
            return Err(LlmError::InvalidRequest("messages must not be empty".into()));
        }
        if self.n_samples == 0 {
            return Err(LlmError::InvalidRequest("n_samples must be at least 1".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_output_tokens == 0 {
            return Err(LlmError::InvalidRequest("max_output_tokens must be positive".into()));
        }
        Ok(())
    }

    /// Hash of `(model_id, messages, temperature, n_samples)`; keys the mock
    /// script and the response cache.
    pub fn fingerprint(&self) -> String {
        let canonical = json!([self.model_id, self.messages, self.temperature, self.n_samples]);
        sha256_hex(canonical.to_string())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub index: u32,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    /// Successful completions only; failed samples live in `failures`.
    pub texts: Vec<String>,
    pub failures: Vec<SampleFailure>,
    pub usage: Usage,
    pub provider_meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f32>,
    pub model_id: String,
}

impl EmbeddingVector {
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt()
    }
}

fn default_kind() -> BackendKind {
    BackendKind::OpenAi
}
fn default_max_in_flight() -> usize {
    8
}
fn default_retry_limit() -> u32 {
    3
}
fn default_backoff() -> u64 {
    500
}
fn default_request_timeout() -> u64 {
    120_000
}
fn default_max_tokens() -> u32 {
    4096
}
fn default_embedding_model() -> String {
    "sentence-transformers/all-mpnet-base-v2".to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// Any service speaking the open chat-completions/embeddings HTTP schema.
    #[serde(rename = "openai")]
    OpenAi,
    /// Offline deterministic responder (see [`SyntheticResponder`]).
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    #[serde(default = "default_kind")]
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint_url: String,
    /// Name of the environment variable holding the API key; empty disables auth.
    #[serde(default)]
    pub api_key_env: String,
    pub model_id: String,
    #[serde(default = "default_embedding_model")]
    pub embedding_model_id: String,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_retry_limit")]
    pub retry_limit: u32,
    #[serde(default = "default_backoff")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_request_timeout")]
    pub request_timeout_ms: u64,
    #[serde(default = "default_max_tokens")]
    pub max_output_tokens: u32,
}

impl ProviderConfig {
    pub fn mock(model_id: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoint_url: String::new(),
            api_key_env: String::new(),
            model_id: model_id.into(),
            embedding_model_id: "mock-embedding".into(),
            max_in_flight: default_max_in_flight(),
            retry_limit: 0,
            backoff_base_ms: 1,
            request_timeout_ms: default_request_timeout(),
            max_output_tokens: default_max_tokens(),
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.max_in_flight == 0 {
            return Err(LlmError::Config("max_in_flight must be at least 1".into()));
        }
        if self.backoff_base_ms == 0 {
            return Err(LlmError::Config("backoff_base_ms must be positive".into()));
        }
        if self.kind == BackendKind::OpenAi && self.endpoint_url.is_empty() {
            return Err(LlmError::Config("endpoint_url is required for http providers".into()));
        }
        Ok(())
    }
}

/// A chat/embedding implementation behind a [`Gateway`].
pub trait LlmBackend: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError>;
    fn embed(&self, texts: &[String], model_id: &str) -> Result<Vec<Vec<f32>>, LlmError>;
}

/// Counting semaphore bounding the number of outstanding backend calls.
struct Limiter {
    in_flight: Mutex<usize>,
    released: Condvar,
    max: usize,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(max: usize) -> Self {
        Self {
            in_flight: Mutex::new(0),
            released: Condvar::new(),
            max: max.max(1),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().unwrap();
        while *n >= self.max {
            n = self.released.wait(n).unwrap();
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().unwrap() -= 1;
        self.0.released.notify_one();
    }
}

/// Append-only line-delimited JSON log of requests and responses.
pub struct RequestLog {
    sink: Mutex<LogSink>,
}

enum LogSink {
    File(BufWriter<File>),
    Memory(Vec<String>),
}

impl RequestLog {
    pub fn to_file(path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            sink: Mutex::new(LogSink::File(BufWriter::new(file))),
        })
    }

    pub fn in_memory() -> Self {
        Self {
            sink: Mutex::new(LogSink::Memory(Vec::new())),
        }
    }

    pub fn append(&self, record: serde_json::Value) {
        let line = record.to_string();
        let mut sink = self.sink.lock().unwrap();
        match &mut *sink {
            LogSink::File(w) => {
                if let Err(e) = writeln!(w, "{line}").and_then(|_| w.flush()) {
                    tracing::warn!("request log write failed: {e}");
                }
            }
            LogSink::Memory(lines) => lines.push(line),
        }
    }

    /// Lines of an in-memory log (empty for file logs).
    pub fn lines(&self) -> Vec<String> {
        match &*self.sink.lock().unwrap() {
            LogSink::Memory(lines) => lines.clone(),
            LogSink::File(_) => Vec::new(),
        }
    }
}

pub struct Gateway {
    backend: Arc<dyn LlmBackend>,
    config: ProviderConfig,
    limiter: Limiter,
    cache: Mutex<HashMap<String, ChatResponse>>,
    log: Option<Arc<RequestLog>>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn LlmBackend>, config: ProviderConfig) -> Self {
        let limiter = Limiter::new(config.max_in_flight);
        Self {
            backend,
            config,
            limiter,
            cache: Mutex::new(HashMap::new()),
            log: None,
        }
    }

    /// Builds the backend named by `config.kind`.
    pub fn from_config(config: &ProviderConfig) -> Result<Self, LlmError> {
        config.validate()?;
        let backend: Arc<dyn LlmBackend> = match config.kind {
            BackendKind::OpenAi => Arc::new(HttpBackend::new(config)?),
            BackendKind::Mock => Arc::new(MockBackend::with_responder(Arc::new(
                SyntheticResponder,
            ))),
        };
        Ok(Self::new(backend, config.clone()))
    }

    pub fn with_log(mut self, log: Arc<RequestLog>) -> Self {
        self.log = Some(log);
        self
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    pub fn model_id(&self) -> &str {
        &self.config.model_id
    }

    /// A request for `prompt` carrying this gateway's model and token limit.
    pub fn request(&self, prompt: impl Into<String>, temperature: f64, n_samples: u32) -> ChatRequest {
        ChatRequest {
            messages: vec![Message::user(prompt)],
            temperature,
            n_samples,
            max_output_tokens: self.config.max_output_tokens,
            model_id: self.config.model_id.clone(),
        }
    }

    /// Runs a chat completion. Temperature-0 responses are cached by request
    /// fingerprint; sampled requests always reach the backend.
    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        request.validate()?;
        let fingerprint = request.fingerprint();
        let cacheable = request.temperature == 0.0;
        if cacheable {
            if let Some(hit) = self.cache.lock().unwrap().get(&fingerprint).cloned() {
                self.log_chat(request, &fingerprint, Ok(&hit), true);
                return Ok(hit);
            }
        }
        let result = {
            let _permit = self.limiter.acquire();
            self.backend.chat(request)
        };
        let result = result.map(|mut r| {
            r.texts.truncate(request.n_samples as usize);
            r
        });
        self.log_chat(request, &fingerprint, result.as_ref(), false);
        if cacheable {
            if let Ok(response) = &result {
                self.cache
                    .lock()
                    .unwrap()
                    .insert(fingerprint, response.clone());
            }
        }
        result
    }

    /// Embeds every text; one vector per input, order preserved.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, LlmError> {
        if texts.is_empty() {
            return Err(LlmError::InvalidRequest("no texts to embed".into()));
        }
        if texts.iter().any(|t| t.is_empty()) {
            return Err(LlmError::InvalidRequest("cannot embed an empty string".into()));
        }
        let raw = {
            let _permit = self.limiter.acquire();
            self.backend.embed(texts, &self.config.embedding_model_id)
        }?;
        if raw.len() != texts.len() {
            return Err(LlmError::Provider(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                raw.len()
            )));
        }
        let dim = raw[0].len();
        if let Some(bad) = raw.iter().find(|v| v.len() != dim) {
            return Err(LlmError::DimensionMismatch {
                expected: dim,
                got: bad.len(),
            });
        }
        if let Some(log) = &self.log {
            log.append(json!({
                "kind": "embed",
                "model_id": self.config.embedding_model_id,
                "count": texts.len(),
                "dimension": dim,
            }));
        }
        Ok(raw
            .into_iter()
            .map(|values| EmbeddingVector {
                values,
                model_id: self.config.embedding_model_id.clone(),
            })
            .collect())
    }

    fn log_chat(
        &self,
        request: &ChatRequest,
        fingerprint: &str,
        result: Result<&ChatResponse, &LlmError>,
        cached: bool,
    ) {
        let Some(log) = &self.log else { return };
        let record = match result {
            Ok(r) => json!({
                "kind": "chat",
                "fingerprint": fingerprint,
                "model_id": request.model_id,
                "temperature": request.temperature,
                "n_samples": request.n_samples,
                "cached": cached,
                "texts": r.texts,
                "failures": r.failures,
                "usage": r.usage,
            }),
            Err(e) => json!({
                "kind": "chat",
                "fingerprint": fingerprint,
                "model_id": request.model_id,
                "temperature": request.temperature,
                "n_samples": request.n_samples,
                "error": e.to_string(),
            }),
        };
        log.append(record);
    }
}
