//! OpenAI-compatible HTTP backends.
//!
//! `POST {endpoint}/chat/completions` with `model`, `messages`,
//! `temperature`, `top_p`; `POST {endpoint}/embeddings` with `model`,
//! `input`. The bearer token is read from an environment variable.

use std::time::Duration;

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ChatMessage, ChatParams, ChatProvider, EmbeddingProvider, ProviderError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub endpoint_url: String,
    pub model_id: String,
    /// Name of the variable holding the API key. Empty means no auth header.
    pub api_key_env: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub max_in_flight: usize,
    /// First retry delay; doubles on every further retry.
    pub backoff_base_secs: f64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            endpoint_url: "https://api.openai.com/v1".into(),
            model_id: "gpt-3.5-turbo".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_secs: 60.0,
            max_retries: 3,
            max_in_flight: 8,
            backoff_base_secs: 1.0,
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.timeout_secs.is_nan() || self.timeout_secs <= 0.0 {
            return Err(ProviderError::Config("timeout must be positive".into()));
        }
        if self.max_in_flight == 0 {
            return Err(ProviderError::Config("max_in_flight must be at least 1".into()));
        }
        if self.backoff_base_secs < 0.0 {
            return Err(ProviderError::Config("backoff base must be non-negative".into()));
        }
        if self.endpoint_url.is_empty() || self.model_id.is_empty() {
            return Err(ProviderError::Config("endpoint_url and model_id are required".into()));
        }
        Ok(())
    }

    /// Worst-case wall time of one logical call.
    pub fn max_blocking(&self) -> Duration {
        let attempts = self.max_retries + 1;
        let backoff: f64 = (0..self.max_retries)
            .map(|i| self.backoff_base_secs * 2f64.powi(i as i32))
            .sum();
        Duration::from_secs_f64(self.timeout_secs * attempts as f64 + backoff)
    }
}

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            permits: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut p = self.permits.lock();
        while *p == 0 {
            self.cv.wait(&mut p);
        }
        *p -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock() += 1;
        self.0.cv.notify_one();
    }
}

enum Failure {
    Retry(ProviderError),
    Fatal(ProviderError),
}

struct Backend {
    cfg: ProviderConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
    gate: Semaphore,
}

impl Backend {
    fn new(cfg: ProviderConfig) -> Result<Self, ProviderError> {
        cfg.validate()?;
        let api_key = if cfg.api_key_env.is_empty() {
            None
        } else {
            Some(
                std::env::var(&cfg.api_key_env)
                    .map_err(|_| ProviderError::MissingApiKey(cfg.api_key_env.clone()))?,
            )
        };
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build();
        let gate = Semaphore::new(cfg.max_in_flight);
        Ok(Self {
            cfg,
            agent,
            api_key,
            gate,
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.cfg.endpoint_url.trim_end_matches('/'), path)
    }

    fn post_once(&self, url: &str, body: &Value, attempt: u32) -> Result<Value, Failure> {
        let mut req = self.agent.post(url).set("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        match req.send_json(body) {
            Ok(resp) => resp
                .into_json::<Value>()
                .map_err(|e| Failure::Fatal(ProviderError::Malformed(e.to_string()))),
            Err(ureq::Error::Status(code, resp)) => {
                let body = resp.into_string().unwrap_or_default();
                match code {
                    401 | 403 => Err(Failure::Fatal(ProviderError::Auth(code))),
                    429 | 500..=599 => Err(Failure::Retry(ProviderError::Status { status: code, body })),
                    _ => Err(Failure::Fatal(ProviderError::Status { status: code, body })),
                }
            }
            Err(ureq::Error::Transport(t)) => {
                let message = t.to_string();
                let timed_out = message.contains("timed out") || message.contains("Timeout");
                Err(Failure::Retry(if timed_out {
                    ProviderError::Timeout { attempts: attempt + 1 }
                } else {
                    ProviderError::Transport {
                        attempts: attempt + 1,
                        message,
                    }
                }))
            }
        }
    }

    fn post(&self, path: &str, body: Value) -> Result<Value, ProviderError> {
        let url = self.url(path);
        let _permit = self.gate.acquire();
        let mut attempt = 0;
        loop {
            match self.post_once(&url, &body, attempt) {
                Ok(v) => return Ok(v),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retry(e)) if attempt >= self.cfg.max_retries => {
                    return Err(match e {
                        ProviderError::Timeout { .. } => ProviderError::Timeout { attempts: attempt + 1 },
                        ProviderError::Transport { message, .. } => ProviderError::Transport {
                            attempts: attempt + 1,
                            message,
                        },
                        other => other,
                    })
                }
                Err(Failure::Retry(e)) => {
                    let delay = self.cfg.backoff_base_secs * 2f64.powi(attempt as i32);
                    log::warn!("{url}: {e}; retrying in {delay:.2}s");
                    std::thread::sleep(Duration::from_secs_f64(delay));
                    attempt += 1;
                }
            }
        }
    }
}

pub struct HttpChat {
    backend: Backend,
}

impl HttpChat {
    pub fn new(cfg: ProviderConfig) -> Result<Self, ProviderError> {
        Ok(Self {
            backend: Backend::new(cfg)?,
        })
    }
}

impl ChatProvider for HttpChat {
    fn model_id(&self) -> &str {
        &self.backend.cfg.model_id
    }

    fn complete(&self, messages: &[ChatMessage], params: &ChatParams) -> Result<String, ProviderError> {
        let body = json!({
            "model": self.backend.cfg.model_id,
            "messages": messages,
            "temperature": params.temperature,
            "top_p": params.top_p,
        });
        let resp = self.backend.post("chat/completions", body)?;
        let content = resp
            .pointer("/choices/0/message/content")
            .ok_or_else(|| ProviderError::Malformed("missing choices[0].message.content".into()))?;
        match content {
            Value::String(s) if !s.trim().is_empty() => Ok(s.clone()),
            Value::String(_) | Value::Null => Err(ProviderError::EmptyCompletion),
            _ => Err(ProviderError::Malformed("message content is not a string".into())),
        }
    }
}

pub struct HttpEmbedder {
    backend: Backend,
}

impl HttpEmbedder {
    pub fn new(cfg: ProviderConfig) -> Result<Self, ProviderError> {
        Ok(Self {
            backend: Backend::new(cfg)?,
        })
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn model_id(&self) -> &str {
        &self.backend.cfg.model_id
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, ProviderError> {
        let body = json!({ "model": self.backend.cfg.model_id, "input": text });
        let resp = self.backend.post("embeddings", body)?;
        let values = resp
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| ProviderError::Malformed("missing data[0].embedding".into()))?;
        values
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| ProviderError::Malformed("non-numeric embedding entry".into())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::stub::{StubResponse, StubServer};
    use std::time::Instant;

    fn cfg(url: &str) -> ProviderConfig {
        ProviderConfig {
            endpoint_url: url.into(),
            model_id: "stub-model".into(),
            api_key_env: String::new(),
            timeout_secs: 5.0,
            max_retries: 2,
            max_in_flight: 2,
            backoff_base_secs: 0.01,
        }
    }

    fn chat_ok(text: &str) -> StubResponse {
        StubResponse::json(200, json!({"choices": [{"message": {"role": "assistant", "content": text}}]}))
    }

    #[test]
    fn sends_sampling_parameters() {
        let stub = StubServer::start(|_| chat_ok("fine"));
        let chat = HttpChat::new(cfg(&stub.url())).unwrap();
        let reply = chat
            .complete(&[ChatMessage::user("hi")], &ChatParams::default())
            .unwrap();
        assert_eq!(reply, "fine");
        let reqs = stub.requests();
        assert_eq!(reqs.len(), 1);
        assert_eq!(reqs[0].path, "/chat/completions");
        let body = reqs[0].json();
        assert_eq!(body["temperature"], 0.3);
        assert_eq!(body["top_p"], 1.0);
        assert_eq!(body["model"], "stub-model");
        assert_eq!(body["messages"][0]["content"], "hi");
    }

    #[test]
    fn retries_transient_status() {
        let stub = StubServer::start(|_| chat_ok("ok"));
        stub.push_override(StubResponse::json(429, json!({"error": {"message": "slow down"}})));
        let chat = HttpChat::new(cfg(&stub.url())).unwrap();
        assert_eq!(chat.complete(&[ChatMessage::user("x")], &ChatParams::default()).unwrap(), "ok");
        assert_eq!(stub.requests().len(), 2);
    }

    #[test]
    fn auth_failure_is_not_retried() {
        let stub = StubServer::start(|_| StubResponse::json(401, json!({})));
        let chat = HttpChat::new(cfg(&stub.url())).unwrap();
        assert!(matches!(
            chat.complete(&[ChatMessage::user("x")], &ChatParams::default()),
            Err(ProviderError::Auth(401))
        ));
        assert_eq!(stub.requests().len(), 1);
    }

    #[test]
    fn gives_up_after_retries() {
        let stub = StubServer::start(|_| StubResponse::json(503, json!({})));
        let c = cfg(&stub.url());
        let chat = HttpChat::new(c.clone()).unwrap();
        let start = Instant::now();
        assert!(matches!(
            chat.complete(&[ChatMessage::user("x")], &ChatParams::default()),
            Err(ProviderError::Status { status: 503, .. })
        ));
        assert!(start.elapsed() <= c.max_blocking());
        assert_eq!(stub.requests().len(), 3);
    }

    #[test]
    fn malformed_body() {
        let stub = StubServer::start(|_| StubResponse::json(200, json!({"nope": 1})));
        let chat = HttpChat::new(cfg(&stub.url())).unwrap();
        assert!(matches!(
            chat.complete(&[ChatMessage::user("x")], &ChatParams::default()),
            Err(ProviderError::Malformed(_))
        ));
        let stub = StubServer::start(|_| chat_ok(""));
        let chat = HttpChat::new(cfg(&stub.url())).unwrap();
        assert!(matches!(
            chat.complete(&[ChatMessage::user("x")], &ChatParams::default()),
            Err(ProviderError::EmptyCompletion)
        ));
    }

    #[test]
    fn unreachable_endpoint_is_a_transport_error() {
        let mut c = cfg("http://127.0.0.1:9");
        c.max_retries = 1;
        let chat = HttpChat::new(c).unwrap();
        let err = chat.complete(&[ChatMessage::user("x")], &ChatParams::default()).unwrap_err();
        assert!(matches!(err, ProviderError::Transport { attempts: 2, .. } | ProviderError::Timeout { .. }));
    }

    #[test]
    fn bearer_token_from_env() {
        std::env::set_var("TABSAGE_TEST_KEY", "sekrit");
        let stub = StubServer::start(|_| chat_ok("ok"));
        let mut c = cfg(&stub.url());
        c.api_key_env = "TABSAGE_TEST_KEY".into();
        HttpChat::new(c)
            .unwrap()
            .complete(&[ChatMessage::user("x")], &ChatParams::default())
            .unwrap();
        assert_eq!(stub.requests()[0].header("authorization").as_deref(), Some("Bearer sekrit"));

        let mut missing = cfg(&stub.url());
        missing.api_key_env = "TABSAGE_TEST_KEY_UNSET".into();
        assert!(matches!(HttpChat::new(missing), Err(ProviderError::MissingApiKey(_))));
    }

    #[test]
    fn embeddings_round_trip() {
        let stub = StubServer::start(|_| StubResponse::json(200, json!({"data": [{"index": 0, "embedding": [0.5, -1.0, 2.0]}]})));
        let e = HttpEmbedder::new(cfg(&stub.url())).unwrap();
        assert_eq!(e.embed("abc").unwrap(), vec![0.5, -1.0, 2.0]);
        let body = stub.requests()[0].json();
        assert_eq!(stub.requests()[0].path, "/embeddings");
        assert_eq!(body["input"], "abc");
    }

    #[test]
    fn config_validation() {
        let mut c = ProviderConfig::default();
        c.max_in_flight = 0;
        assert!(c.validate().is_err());
        let mut c = ProviderConfig::default();
        c.timeout_secs = 0.0;
        assert!(c.validate().is_err());
        let c = ProviderConfig {
            timeout_secs: 2.0,
            max_retries: 2,
            backoff_base_secs: 1.0,
            ..Default::default()
        };
        assert_eq!(c.max_blocking(), Duration::from_secs(9));
    }
}
