//! A tiny in-process HTTP/1.1 server that speaks just enough of the
//! OpenAI-compatible wire format for offline tests. Every request is
//! recorded so tests can compare network-level counts with the usage meter.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use parking_lot::Mutex;
use serde_json::{json, Value};

use super::{ChatMessage, ChatParams, ChatProvider, EmbeddingProvider, MockChat, MockEmbedder};

#[derive(Debug, Clone)]
pub struct StubRequest {
    pub method: String,
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: String,
}

impl StubRequest {
    pub fn json(&self) -> Value {
        serde_json::from_str(&self.body).unwrap_or(Value::Null)
    }

    pub fn header(&self, name: &str) -> Option<String> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.clone())
    }

    /// Concatenated message contents of a chat request.
    pub fn prompt(&self) -> String {
        self.json()["messages"]
            .as_array()
            .map(|msgs| {
                msgs.iter()
                    .filter_map(|m| m["content"].as_str())
                    .collect::<Vec<_>>()
                    .join("\n")
            })
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone)]
pub struct StubResponse {
    pub status: u16,
    pub body: String,
}

impl StubResponse {
    pub fn json(status: u16, body: Value) -> Self {
        Self {
            status,
            body: body.to_string(),
        }
    }
}

type Handler = dyn Fn(&StubRequest) -> StubResponse + Send + Sync;

struct Shared {
    requests: Mutex<Vec<StubRequest>>,
    overrides: Mutex<VecDeque<StubResponse>>,
    handler: Box<Handler>,
    stop: AtomicBool,
}

pub struct StubServer {
    addr: std::net::SocketAddr,
    shared: Arc<Shared>,
    accept: Option<JoinHandle<()>>,
}

impl StubServer {
    pub fn start(handler: impl Fn(&StubRequest) -> StubResponse + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind loopback");
        let addr = listener.local_addr().expect("local addr");
        let shared = Arc::new(Shared {
            requests: Mutex::new(Vec::new()),
            overrides: Mutex::new(VecDeque::new()),
            handler: Box::new(handler),
            stop: AtomicBool::new(false),
        });
        let s = shared.clone();
        let accept = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if s.stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let s = s.clone();
                std::thread::spawn(move || {
                    let _ = serve(stream, &s);
                });
            }
        });
        Self {
            addr,
            shared,
            accept: Some(accept),
        }
    }

    /// Serves chat completions from `chat` and embeddings from `embedder`.
    pub fn openai(chat: MockChat, embedder: MockEmbedder) -> Self {
        Self::start(move |req| match req.path.as_str() {
            "/chat/completions" => {
                let body = req.json();
                let messages: Vec<ChatMessage> = serde_json::from_value(body["messages"].clone()).unwrap_or_default();
                let params = ChatParams {
                    temperature: body["temperature"].as_f64().unwrap_or(1.0),
                    top_p: body["top_p"].as_f64().unwrap_or(1.0),
                };
                match chat.complete(&messages, &params) {
                    Ok(text) => StubResponse::json(
                        200,
                        json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": text}}]}),
                    ),
                    Err(e) => StubResponse::json(404, json!({"error": {"message": e.to_string()}})),
                }
            }
            "/embeddings" => {
                let text = req.json()["input"].as_str().unwrap_or_default().to_owned();
                match embedder.embed(&text) {
                    Ok(v) => StubResponse::json(200, json!({"data": [{"index": 0, "embedding": v}]})),
                    Err(e) => StubResponse::json(400, json!({"error": {"message": e.to_string()}})),
                }
            }
            _ => StubResponse::json(404, json!({"error": {"message": "no route"}})),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn requests(&self) -> Vec<StubRequest> {
        self.shared.requests.lock().clone()
    }

    pub fn requests_to(&self, path: &str) -> Vec<StubRequest> {
        self.requests().into_iter().filter(|r| r.path == path).collect()
    }

    pub fn clear(&self) {
        self.shared.requests.lock().clear();
    }

    /// The next request gets `resp` instead of the handler's answer.
    pub fn push_override(&self, resp: StubResponse) {
        self.shared.overrides.lock().push_back(resp);
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

fn serve(stream: TcpStream, shared: &Shared) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let mut parts = line.split_whitespace();
    let method = parts.next().unwrap_or_default().to_owned();
    let path = parts.next().unwrap_or_default().to_owned();
    if method.is_empty() {
        return Ok(());
    }
    let mut headers = Vec::new();
    let mut content_length = 0usize;
    loop {
        let mut h = String::new();
        if reader.read_line(&mut h)? == 0 {
            break;
        }
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            let (k, v) = (k.trim().to_owned(), v.trim().to_owned());
            if k.eq_ignore_ascii_case("content-length") {
                content_length = v.parse().unwrap_or(0);
            }
            headers.push((k, v));
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;
    let req = StubRequest {
        method,
        path,
        headers,
        body: String::from_utf8_lossy(&body).into_owned(),
    };
    shared.requests.lock().push(req.clone());
    let resp = match shared.overrides.lock().pop_front() {
        Some(r) => r,
        None => (shared.handler)(&req),
    };
    let mut out = stream;
    write!(
        out,
        "HTTP/1.1 {} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
        resp.status,
        resp.body.len(),
        resp.body
    )?;
    out.flush()
}
