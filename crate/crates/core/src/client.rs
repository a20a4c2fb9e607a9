//! Chat-completion clients: a blocking HTTP client with retry and a
//! deterministic fixture-backed stub that records every request it sees.

use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const API_KEY_ENV: &str = "MEDFORGE_API_KEY";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("http status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("undecodable response: {0}")]
    Decode(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("stub: {0}")]
    Stub(String),
    #[error("invalid provider `{0}` (expected `live` or `stub:<fixture>`)")]
    Provider(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageUrl {
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    ImageUrl { image_url: ImageUrl },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: Vec<ContentPart>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f32,
}

impl ChatRequest {
    /// Single user turn holding `text`. The model name is filled in by the client.
    pub fn user(text: impl Into<String>) -> Self {
        Self {
            model: String::new(),
            messages: vec![ChatMessage {
                role: "user".into(),
                content: vec![ContentPart::Text { text: text.into() }],
            }],
            temperature: 0.0,
        }
    }

    /// Attach a PNG image to the last message as a base64 data URL.
    pub fn with_png(mut self, bytes: &[u8]) -> Self {
        let url = format!("data:image/png;base64,{}", base64::engine::general_purpose::STANDARD.encode(bytes));
        if let Some(last) = self.messages.last_mut() {
            last.content.push(ContentPart::ImageUrl {
                image_url: ImageUrl { url },
            });
        }
        self
    }

    /// All text parts joined with newlines.
    pub fn text(&self) -> String {
        let mut parts = Vec::new();
        for m in &self.messages {
            for c in &m.content {
                if let ContentPart::Text { text } = c {
                    parts.push(text.as_str());
                }
            }
        }
        parts.join("\n")
    }

    /// Data URLs of every attached image, in order.
    pub fn image_urls(&self) -> Vec<&str> {
        self.messages
            .iter()
            .flat_map(|m| &m.content)
            .filter_map(|c| match c {
                ContentPart::ImageUrl { image_url } => Some(image_url.url.as_str()),
                ContentPart::Text { .. } => None,
            })
            .collect()
    }

    pub fn image_count(&self) -> usize {
        self.messages
            .iter()
            .flat_map(|m| &m.content)
            .filter(|c| matches!(c, ContentPart::ImageUrl { .. }))
            .count()
    }
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Debug, Deserialize)]
struct ResponseMessage {
    content: Option<String>,
}

/// Anything that turns a chat request into the assistant's text.
pub trait ChatClient: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<String, ClientError>;

    /// Upper bound on in-flight requests callers should respect.
    fn concurrency_bound(&self) -> usize {
        1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff_ms: 500,
            multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    fn backoff(&self, attempt: u32) -> Duration {
        let ms = self.initial_backoff_ms as f64 * self.multiplier.powi(attempt as i32);
        Duration::from_millis(ms.min(60_000.0) as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorConfig {
    pub endpoint: String,
    pub model_name: String,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_concurrency")]
    pub concurrency_bound: usize,
    #[serde(default)]
    pub temperature: f32,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_concurrency() -> usize {
    4
}

fn default_timeout() -> u64 {
    120
}

impl AnnotatorConfig {
    pub fn new(endpoint: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model_name: model_name.into(),
            retry: RetryPolicy::default(),
            concurrency_bound: default_concurrency(),
            temperature: 0.0,
            timeout_secs: default_timeout(),
        }
    }
}

pub struct HttpChatClient {
    config: AnnotatorConfig,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

impl HttpChatClient {
    pub fn new(config: AnnotatorConfig) -> Result<Self, ClientError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        Ok(Self {
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            config,
            http,
        })
    }

    fn attempt(&self, body: &ChatRequest) -> Result<String, (bool, ClientError)> {
        let mut rb = self.http.post(&self.config.endpoint).json(body);
        if let Some(key) = &self.api_key {
            rb = rb.bearer_auth(key);
        }
        let resp = rb.send().map_err(|e| (true, ClientError::Transport(e.to_string())))?;
        let status = resp.status();
        if !status.is_success() {
            let retryable = status.as_u16() == 429 || status.is_server_error();
            let body = resp.text().unwrap_or_default();
            return Err((
                retryable,
                ClientError::Status {
                    status: status.as_u16(),
                    body,
                },
            ));
        }
        let parsed: ChatResponse = resp.json().map_err(|e| (false, ClientError::Decode(e.to_string())))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| (false, ClientError::Decode("no choices[0].message.content".into())))
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, req: &ChatRequest) -> Result<String, ClientError> {
        let mut body = req.clone();
        body.model = self.config.model_name.clone();
        body.temperature = self.config.temperature;
        let attempts = self.config.retry.max_attempts.max(1);
        let mut last = None;
        for attempt in 0..attempts {
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err((false, e)) => return Err(e),
                Err((true, e)) => {
                    tracing::warn!(attempt, error = %e, "chat request failed");
                    last = Some(e);
                    if attempt + 1 < attempts {
                        std::thread::sleep(self.config.retry.backoff(attempt));
                    }
                }
            }
        }
        Err(ClientError::Exhausted {
            attempts,
            last: last.map(|e| e.to_string()).unwrap_or_default(),
        })
    }

    fn concurrency_bound(&self) -> usize {
        self.config.concurrency_bound.max(1)
    }
}

/// Reply rule of a stub fixture: first rule whose `contains` occurs in the
/// request text wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StubRule {
    pub contains: String,
    pub reply: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StubFixture {
    #[serde(default)]
    pub rules: Vec<StubRule>,
    #[serde(default)]
    pub default: Option<String>,
}

type Responder = dyn Fn(&ChatRequest) -> Result<String, ClientError> + Send + Sync;

/// Deterministic client for tests and offline runs.
#[derive(Clone)]
pub struct StubClient {
    responder: Arc<Responder>,
    captured: Arc<Mutex<Vec<ChatRequest>>>,
}

impl StubClient {
    pub fn from_fn<F>(f: F) -> Self
    where
        F: Fn(&ChatRequest) -> Result<String, ClientError> + Send + Sync + 'static,
    {
        Self {
            responder: Arc::new(f),
            captured: Arc::new(Mutex::new(Vec::new())),
        }
    }

    /// Always answers `reply`.
    pub fn fixed(reply: impl Into<String>) -> Self {
        let reply = reply.into();
        Self::from_fn(move |_| Ok(reply.clone()))
    }

    pub fn failing(message: impl Into<String>) -> Self {
        let message = message.into();
        Self::from_fn(move |_| Err(ClientError::Stub(message.clone())))
    }

    pub fn from_fixture(fixture: StubFixture) -> Self {
        Self::from_fn(move |req| {
            let text = req.text();
            fixture
                .rules
                .iter()
                .find(|r| text.contains(&r.contains))
                .map(|r| r.reply.clone())
                .or_else(|| fixture.default.clone())
                .ok_or_else(|| ClientError::Stub("no fixture rule matched".into()))
        })
    }

    pub fn from_fixture_file(path: &Path) -> Result<Self, ClientError> {
        let raw = std::fs::read_to_string(path).map_err(|e| ClientError::Stub(format!("{}: {e}", path.display())))?;
        let fixture: StubFixture = serde_json::from_str(&raw).map_err(|e| ClientError::Stub(format!("{}: {e}", path.display())))?;
        Ok(Self::from_fixture(fixture))
    }

    pub fn calls(&self) -> usize {
        self.captured.lock().expect("stub capture lock").len()
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.captured.lock().expect("stub capture lock").clone()
    }

    /// Text of every captured request, in call order.
    pub fn prompts(&self) -> Vec<String> {
        self.requests().iter().map(ChatRequest::text).collect()
    }
}

impl ChatClient for StubClient {
    fn complete(&self, req: &ChatRequest) -> Result<String, ClientError> {
        self.captured.lock().expect("stub capture lock").push(req.clone());
        (self.responder)(req)
    }
}

/// `live` or `stub:<fixture-file>`.
#[derive(Debug, Clone, PartialEq)]
pub enum Provider {
    Live,
    Stub(std::path::PathBuf),
}

impl std::str::FromStr for Provider {
    type Err = ClientError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "live" {
            Ok(Provider::Live)
        } else if let Some(path) = s.strip_prefix("stub:") {
            if path.is_empty() {
                return Err(ClientError::Provider(s.to_string()));
            }
            Ok(Provider::Stub(path.into()))
        } else {
            Err(ClientError::Provider(s.to_string()))
        }
    }
}

impl Provider {
    /// Build a client; `config` is only consulted for live providers.
    pub fn client(&self, config: Option<&AnnotatorConfig>) -> Result<Box<dyn ChatClient>, ClientError> {
        match self {
            Provider::Stub(path) => Ok(Box::new(StubClient::from_fixture_file(path)?)),
            Provider::Live => {
                let cfg = config.ok_or_else(|| ClientError::Provider("live provider needs an endpoint".into()))?;
                Ok(Box::new(HttpChatClient::new(cfg.clone())?))
            }
        }
    }
}

/// Map `f` over `items` with at most `bound` concurrent calls. Output keeps input order.
pub fn map_bounded<T, R, F>(items: &[T], bound: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Send + Sync,
{
    use rayon::prelude::*;
    if bound <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(bound).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(_) => items.iter().map(f).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;

    /// One-shot HTTP server answering each connection with the next canned reply.
    fn serve(replies: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in replies {
                let (mut stream, _) = listener.accept().unwrap();
                let mut buf = Vec::new();
                let mut chunk = [0u8; 4096];
                loop {
                    let n = stream.read(&mut chunk).unwrap();
                    buf.extend_from_slice(&chunk[..n]);
                    let text = String::from_utf8_lossy(&buf).to_string();
                    if let Some(idx) = text.find("\r\n\r\n") {
                        let len = text[..idx]
                            .lines()
                            .find_map(|l| {
                                let l = l.to_ascii_lowercase();
                                l.strip_prefix("content-length:").map(|v| v.trim().parse::<usize>().unwrap())
                            })
                            .unwrap_or(0);
                        if buf.len() >= idx + 4 + len {
                            bodies.push(text[idx + 4..].to_string());
                            break;
                        }
                    }
                    if n == 0 {
                        break;
                    }
                }
                let resp = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(resp.as_bytes()).unwrap();
            }
            bodies
        });
        (format!("http://{addr}/v1/chat/completions"), handle)
    }

    #[test]
    fn http_client_speaks_chat_completion_wire_format() {
        let (url, handle) = serve(vec![(
            200,
            r#"{"choices":[{"message":{"role":"assistant","content":"hello"}}]}"#.into(),
        )]);
        let client = HttpChatClient::new(AnnotatorConfig::new(url, "gpt-test")).unwrap();
        let req = ChatRequest::user("describe").with_png(&[1, 2, 3]);
        assert_eq!(client.complete(&req).unwrap(), "hello");
        let bodies = handle.join().unwrap();
        let sent: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
        assert_eq!(sent["model"], "gpt-test");
        assert_eq!(sent["messages"][0]["role"], "user");
        assert_eq!(sent["messages"][0]["content"][0]["type"], "text");
        assert_eq!(sent["messages"][0]["content"][1]["type"], "image_url");
        assert_eq!(sent["messages"][0]["content"][1]["image_url"]["url"], "data:image/png;base64,AQID");
        assert!(sent["temperature"].is_number());
    }

    #[test]
    fn http_client_retries_server_errors() {
        let (url, handle) = serve(vec![
            (503, "busy".into()),
            (200, r#"{"choices":[{"message":{"content":"ok"}}]}"#.into()),
        ]);
        let mut cfg = AnnotatorConfig::new(url, "m");
        cfg.retry.initial_backoff_ms = 1;
        let client = HttpChatClient::new(cfg).unwrap();
        assert_eq!(client.complete(&ChatRequest::user("x")).unwrap(), "ok");
        assert_eq!(handle.join().unwrap().len(), 2);
    }

    #[test]
    fn http_client_does_not_retry_client_errors() {
        let (url, handle) = serve(vec![(400, "bad".into())]);
        let mut cfg = AnnotatorConfig::new(url, "m");
        cfg.retry.initial_backoff_ms = 1;
        let client = HttpChatClient::new(cfg).unwrap();
        let err = client.complete(&ChatRequest::user("x")).unwrap_err();
        assert!(matches!(err, ClientError::Status { status: 400, .. }));
        handle.join().unwrap();
    }

    #[test]
    fn stub_fixture_routes_by_substring() {
        let stub = StubClient::from_fixture(StubFixture {
            rules: vec![StubRule {
                contains: "judge".into(),
                reply: "<judge>0</judge>".into(),
            }],
            default: Some("fallback".into()),
        });
        assert_eq!(stub.complete(&ChatRequest::user("please judge")).unwrap(), "<judge>0</judge>");
        assert_eq!(stub.complete(&ChatRequest::user("other")).unwrap(), "fallback");
        assert_eq!(stub.calls(), 2);
    }

    #[test]
    fn provider_parsing() {
        assert_eq!("live".parse::<Provider>().unwrap(), Provider::Live);
        assert_eq!("stub:fx.json".parse::<Provider>().unwrap(), Provider::Stub("fx.json".into()));
        assert!("stub:".parse::<Provider>().is_err());
        assert!("openai".parse::<Provider>().is_err());
    }

    #[test]
    fn map_bounded_preserves_order() {
        let items: Vec<u32> = (0..50).collect();
        let out = map_bounded(&items, 4, |x| x * 2);
        assert_eq!(out, items.iter().map(|x| x * 2).collect::<Vec<_>>());
    }
}
