//! Scripted mock backend for offline runs and tests.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use sha2::{Digest, Sha256};

use super::{ChatRequest, ChatResponse, Gateway, LlmBackend, LlmError, ProviderConfig, Usage};

pub(crate) const FALLBACK_PREFIX: &str = "[mock] unscripted request";

const HASHED_DIM: usize = 64;

/// Computes the completion for sample `index` of an unscripted request.
pub trait Responder: Send + Sync {
    fn respond(&self, request: &ChatRequest, index: u32) -> String;
}

impl<F> Responder for F
where
    F: Fn(&ChatRequest, u32) -> String + Send + Sync,
{
    fn respond(&self, request: &ChatRequest, index: u32) -> String {
        self(request, index)
    }
}

/// Request-fingerprint keyed chat texts and text-keyed embedding vectors.
#[derive(Debug, Clone, Default)]
pub struct MockScript {
    chat: HashMap<String, Vec<String>>,
    embeddings: HashMap<String, Vec<f32>>,
    fallback: Option<Vec<String>>,
}

impl MockScript {
    pub fn new() -> Self {
        Self::default()
    }

    /// Texts served for `request`; sample `i` gets `texts[i % len]`.
    pub fn chat<I, S>(self, request: &ChatRequest, texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.chat_fingerprint(request.fingerprint(), texts)
    }

    pub fn chat_fingerprint<I, S>(mut self, fingerprint: impl Into<String>, texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.chat
            .insert(fingerprint.into(), texts.into_iter().map(Into::into).collect());
        self
    }

    /// Texts served for any request that has no exact entry.
    pub fn fallback<I, S>(mut self, texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.fallback = Some(texts.into_iter().map(Into::into).collect());
        self
    }

    pub fn embedding(mut self, text: impl Into<String>, vector: Vec<f32>) -> Self {
        self.embeddings.insert(text.into(), vector);
        self
    }
}

pub struct MockBackend {
    script: RwLock<MockScript>,
    responder: Option<Arc<dyn Responder>>,
    unscripted: Mutex<Vec<String>>,
    chat_calls: AtomicUsize,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        Self {
            script: RwLock::new(script),
            responder: None,
            unscripted: Mutex::new(Vec::new()),
            chat_calls: AtomicUsize::new(0),
        }
    }

    /// A mock whose unscripted requests are answered by `responder`.
    pub fn with_responder(responder: Arc<dyn Responder>) -> Self {
        Self {
            responder: Some(responder),
            ..Self::new(MockScript::new())
        }
    }

    /// Replaces the whole script.
    pub fn install(&self, script: MockScript) {
        *self.script.write().unwrap() = script;
    }

    /// Fingerprints of requests that fell through to the fallback.
    pub fn unscripted(&self) -> Vec<String> {
        self.unscripted.lock().unwrap().clone()
    }

    pub fn chat_calls(&self) -> usize {
        self.chat_calls.load(Ordering::SeqCst)
    }
}

/// A gateway backed by a fresh mock holding `script`.
pub fn install_mock(script: MockScript) -> Gateway {
    Gateway::new(Arc::new(MockBackend::new(script)), ProviderConfig::mock("mock"))
}

impl LlmBackend for MockBackend {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        self.chat_calls.fetch_add(1, Ordering::SeqCst);
        let fingerprint = request.fingerprint();
        let n = request.n_samples as usize;
        let script = self.script.read().unwrap();
        let texts: Vec<String> = if let Some(texts) = script.chat.get(&fingerprint) {
            cycle(texts, n)
        } else if let Some(responder) = &self.responder {
            (0..request.n_samples)
                .map(|i| responder.respond(request, i))
                .collect()
        } else if let Some(texts) = &script.fallback {
            cycle(texts, n)
        } else {
            self.unscripted.lock().unwrap().push(fingerprint.clone());
            tracing::debug!("mock: unscripted request {}", &fingerprint[..12]);
            vec![format!("{FALLBACK_PREFIX} {}", &fingerprint[..12]); n]
        };
        let completion_tokens = texts
            .iter()
            .map(|t| t.split_whitespace().count() as u64)
            .sum();
        Ok(ChatResponse {
            texts,
            failures: Vec::new(),
            usage: Usage {
                prompt_tokens: request.prompt().split_whitespace().count() as u64,
                completion_tokens,
            },
            provider_meta: [("backend".to_string(), "mock".to_string())].into(),
        })
    }

    fn embed(&self, texts: &[String], _model_id: &str) -> Result<Vec<Vec<f32>>, LlmError> {
        let script = self.script.read().unwrap();
        Ok(texts
            .iter()
            .map(|t| {
                script
                    .embeddings
                    .get(t)
                    .cloned()
                    .unwrap_or_else(|| hashed_embedding(t))
            })
            .collect())
    }
}

fn cycle(texts: &[String], n: usize) -> Vec<String> {
    if texts.is_empty() {
        return Vec::new();
    }
    (0..n).map(|i| texts[i % texts.len()].clone()).collect()
}

/// Feature-hashed bag-of-words vector. Deterministic, and non-zero for any
/// non-empty text.
pub fn hashed_embedding(text: &str) -> Vec<f32> {
    let mut v = vec![0f32; HASHED_DIM];
    let lowered = text.to_lowercase();
    let mut tokens: Vec<&str> = lowered
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .collect();
    if tokens.is_empty() {
        tokens.push(lowered.as_str());
    }
    for token in tokens {
        let digest = Sha256::digest(token.as_bytes());
        let slot = (digest[0] as usize) % HASHED_DIM;
        let sign = if digest[1] & 1 == 0 { 1.0 } else { -1.0 };
        v[slot] += sign;
    }
    if v.iter().all(|x| *x == 0.0) {
        v[0] = 1.0;
    }
    v
}
