//! Chat-completion and embedding backends.
//!
//! Backends implement [`ChatProvider`] / [`EmbeddingProvider`] and know
//! nothing about caching or metering. [`ChatClient`] and [`EmbeddingClient`]
//! wrap a backend with a content-addressed cache and a shared [`UsageMeter`];
//! the rest of the pipeline only talks to the clients.

mod cache;
mod http;
mod meter;
mod mock;
pub mod stub;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::{CacheStatus, JsonCache};
pub use http::{HttpChat, HttpEmbedder, ProviderConfig};
pub use meter::{Stage, StageUsage, UsageMeter, UsageSnapshot};
pub use mock::{mock_provider, MockChat, MockEmbedder};

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("authentication rejected (HTTP {0})")]
    Auth(u16),
    #[error("api key variable `{0}` is not set")]
    MissingApiKey(String),
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response body: {0}")]
    Malformed(String),
    #[error("provider returned an empty completion")]
    EmptyCompletion,
    #[error("embedding has dimension {found}, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("embedding contains a non-finite value")]
    NonFinite,
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("no fixture reply for prompt hash {0}")]
    FixtureMiss(String),
    #[error("invalid provider config: {0}")]
    Config(String),
    #[error("cache: {0}")]
    Cache(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChatParams {
    pub temperature: f64,
    pub top_p: f64,
}

impl Default for ChatParams {
    fn default() -> Self {
        Self {
            temperature: 0.3,
            top_p: 1.0,
        }
    }
}

pub trait ChatProvider: Send + Sync {
    fn model_id(&self) -> &str;
    /// Returns the text of the first choice.
    fn complete(&self, messages: &[ChatMessage], params: &ChatParams) -> Result<String, ProviderError>;
}

pub trait EmbeddingProvider: Send + Sync {
    fn model_id(&self) -> &str;
    fn embed(&self, text: &str) -> Result<Vec<f64>, ProviderError>;
}

/// Hex SHA-256 of the message contents joined by newlines. Fixture files
/// for the mock chat provider are keyed by this.
pub fn prompt_hash(messages: &[ChatMessage]) -> String {
    let joined = messages
        .iter()
        .map(|m| m.content.as_str())
        .collect::<Vec<_>>()
        .join("\n");
    sha256_hex(joined.as_bytes())
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Cache key for a chat request. Any change to the model, sampling
/// parameters, messages or attempt number changes the key.
pub fn chat_cache_key(model_id: &str, params: &ChatParams, messages: &[ChatMessage], attempt: u32) -> String {
    let canonical = serde_json::json!({
        "model": model_id,
        "temperature": params.temperature,
        "top_p": params.top_p,
        "messages": messages,
        "attempt": attempt,
    });
    sha256_hex(canonical.to_string().as_bytes())
}

pub fn embedding_cache_key(model_id: &str, text: &str) -> String {
    let canonical = serde_json::json!({ "model": model_id, "input": text });
    sha256_hex(canonical.to_string().as_bytes())
}

/// What the chat cache stores per request. `words` is filled in by callers
/// that parse the reply into a word list (the explanation stage).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub reply: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub words: Option<Vec<String>>,
}

#[derive(Debug, Clone)]
pub struct Completion {
    pub key: String,
    pub reply: String,
    pub status: CacheStatus,
}

/// A chat backend plus reply cache and usage metering.
pub struct ChatClient {
    provider: Arc<dyn ChatProvider>,
    meter: Arc<UsageMeter>,
    cache: JsonCache<CompletionRecord>,
    params: ChatParams,
}

impl ChatClient {
    pub fn new(
        provider: Arc<dyn ChatProvider>,
        meter: Arc<UsageMeter>,
        cache: JsonCache<CompletionRecord>,
        params: ChatParams,
    ) -> Self {
        Self {
            provider,
            meter,
            cache,
            params,
        }
    }

    pub fn model_id(&self) -> &str {
        self.provider.model_id()
    }

    pub fn params(&self) -> &ChatParams {
        &self.params
    }

    pub fn meter(&self) -> &Arc<UsageMeter> {
        &self.meter
    }

    pub fn complete(&self, messages: &[ChatMessage], stage: Stage) -> Result<Completion, ProviderError> {
        self.complete_attempt(messages, stage, 0)
    }

    /// `attempt > 0` bypasses earlier cached replies for the same prompt.
    pub fn complete_attempt(
        &self,
        messages: &[ChatMessage],
        stage: Stage,
        attempt: u32,
    ) -> Result<Completion, ProviderError> {
        let key = chat_cache_key(self.provider.model_id(), &self.params, messages, attempt);
        let (record, status) = self.cache.get_or_try_insert_with(&key, || {
            let reply = self.provider.complete(messages, &self.params)?;
            self.meter.record_chat_call(stage);
            if reply.trim().is_empty() {
                return Err(ProviderError::EmptyCompletion);
            }
            Ok(CompletionRecord { reply, words: None })
        })?;
        if status == CacheStatus::Hit {
            self.meter.record_cache_hit(stage);
        }
        Ok(Completion {
            key,
            reply: record.reply,
            status,
        })
    }

    pub fn record_words(&self, key: &str, words: Vec<String>) {
        self.cache.update(key, |rec| rec.words = Some(words));
    }

    pub fn flush(&self) -> Result<(), ProviderError> {
        self.cache.flush()
    }
}

/// An embedding backend plus vector cache, metering and dimension check.
pub struct EmbeddingClient {
    provider: Arc<dyn EmbeddingProvider>,
    meter: Arc<UsageMeter>,
    cache: JsonCache<Vec<f64>>,
    dim: usize,
}

impl EmbeddingClient {
    pub fn new(
        provider: Arc<dyn EmbeddingProvider>,
        meter: Arc<UsageMeter>,
        cache: JsonCache<Vec<f64>>,
        dim: usize,
    ) -> Self {
        Self {
            provider,
            meter,
            cache,
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed_text(&self, text: &str, stage: Stage) -> Result<Vec<f64>, ProviderError> {
        if text.is_empty() {
            return Err(ProviderError::EmptyText);
        }
        let key = embedding_cache_key(self.provider.model_id(), text);
        let (vector, status) = self.cache.get_or_try_insert_with(&key, || {
            let v = self.provider.embed(text)?;
            self.meter.record_embed_call(stage);
            if v.len() != self.dim {
                return Err(ProviderError::DimensionMismatch {
                    expected: self.dim,
                    found: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(ProviderError::NonFinite);
            }
            Ok(v)
        })?;
        if status == CacheStatus::Hit {
            self.meter.record_cache_hit(stage);
            if vector.len() != self.dim {
                return Err(ProviderError::DimensionMismatch {
                    expected: self.dim,
                    found: vector.len(),
                });
            }
        }
        Ok(vector)
    }

    pub fn flush(&self) -> Result<(), ProviderError> {
        self.cache.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Counting {
        calls: AtomicUsize,
        reply: String,
    }

    impl ChatProvider for Counting {
        fn model_id(&self) -> &str {
            "counting"
        }
        fn complete(&self, _: &[ChatMessage], _: &ChatParams) -> Result<String, ProviderError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(self.reply.clone())
        }
    }

    fn client(reply: &str) -> (Arc<Counting>, ChatClient) {
        let p = Arc::new(Counting {
            calls: AtomicUsize::new(0),
            reply: reply.into(),
        });
        let c = ChatClient::new(
            p.clone(),
            Arc::new(UsageMeter::default()),
            JsonCache::in_memory(),
            ChatParams::default(),
        );
        (p, c)
    }

    #[test]
    fn cold_then_warm() {
        let (p, c) = client("hi");
        let msgs = [ChatMessage::user("hello")];
        assert_eq!(c.complete(&msgs, Stage::Warmup).unwrap().status, CacheStatus::Miss);
        assert_eq!(c.complete(&msgs, Stage::Warmup).unwrap().status, CacheStatus::Hit);
        let snap = c.meter().snapshot();
        assert_eq!(snap.warmup.chat_calls, 1);
        assert_eq!(snap.warmup.cached_hits, 1);
        assert_eq!(p.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn empty_completion_is_an_error_and_not_cached() {
        let (p, c) = client("   ");
        let msgs = [ChatMessage::user("x")];
        assert!(matches!(c.complete(&msgs, Stage::Inference), Err(ProviderError::EmptyCompletion)));
        assert!(c.complete(&msgs, Stage::Inference).is_err());
        assert_eq!(p.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn key_depends_on_params_and_model() {
        let m = [ChatMessage::user("q")];
        let base = chat_cache_key("a", &ChatParams::default(), &m, 0);
        let hot = ChatParams {
            temperature: 0.7,
            ..Default::default()
        };
        assert_ne!(base, chat_cache_key("a", &hot, &m, 0));
        assert_ne!(base, chat_cache_key("b", &ChatParams::default(), &m, 0));
        assert_ne!(base, chat_cache_key("a", &ChatParams::default(), &m, 1));
        assert_eq!(base, chat_cache_key("a", &ChatParams::default(), &m, 0));
    }

    #[test]
    fn embedding_dimension_is_enforced() {
        let (_, embedder) = mock_provider(1, 384);
        let client = EmbeddingClient::new(
            Arc::new(embedder),
            Arc::new(UsageMeter::default()),
            JsonCache::in_memory(),
            128,
        );
        assert!(matches!(
            client.embed_text("abc", Stage::Inference),
            Err(ProviderError::DimensionMismatch { expected: 128, found: 384 })
        ));
    }

    #[test]
    fn embedding_cache_hit_is_bit_identical() {
        let (_, embedder) = mock_provider(1, 128);
        let client = EmbeddingClient::new(
            Arc::new(embedder),
            Arc::new(UsageMeter::default()),
            JsonCache::in_memory(),
            128,
        );
        let a = client.embed_text("abc", Stage::Inference).unwrap();
        let b = client.embed_text("abc", Stage::Inference).unwrap();
        assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        let snap = client.meter.snapshot();
        assert_eq!((snap.inference.embed_calls, snap.inference.cached_hits), (1, 1));
        assert!(matches!(client.embed_text("", Stage::Inference), Err(ProviderError::EmptyText)));
    }
}
