//! Chat-completion client for hosted generator, filter and policy models.
//!
//! Speaks the widely deployed `/chat/completions` JSON shape, optionally
//! streaming server-sent events so the caller can stop generation as soon
//! as a predicate fires. Requests are bounded by an in-flight limit and
//! retried with exponential backoff on transport errors, 429 and 5xx.

use std::io::{BufRead, BufReader};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ClientError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("missing credentials: environment variable {0} is not set")]
    MissingCredentials(String),
}

impl ClientError {
    pub fn is_retryable(&self) -> bool {
        match self {
            ClientError::Transport(_) => true,
            ClientError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ContentPart {
    Text(String),
    /// PNG bytes, sent inline as a data URL.
    ImagePng(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatMessage {
    pub role: String,
    pub content: Vec<ContentPart>,
}

impl ChatMessage {
    pub fn text(role: &str, text: impl Into<String>) -> Self {
        ChatMessage {
            role: role.into(),
            content: vec![ContentPart::Text(text.into())],
        }
    }

    pub fn with_image(role: &str, png: Vec<u8>, text: impl Into<String>) -> Self {
        let text = text.into();
        let mut content = vec![ContentPart::ImagePng(png)];
        if !text.is_empty() {
            content.push(ContentPart::Text(text));
        }
        ChatMessage {
            role: role.into(),
            content,
        }
    }

    /// Concatenated text parts.
    pub fn text_content(&self) -> String {
        self.content
            .iter()
            .filter_map(|p| match p {
                ContentPart::Text(t) => Some(t.as_str()),
                ContentPart::ImagePng(_) => None,
            })
            .collect()
    }

    pub fn image_count(&self) -> usize {
        self.content.iter().filter(|p| matches!(p, ContentPart::ImagePng(_))).count()
    }

    fn to_json(&self) -> Value {
        let parts: Vec<Value> = self
            .content
            .iter()
            .map(|p| match p {
                ContentPart::Text(t) => json!({"type": "text", "text": t}),
                ContentPart::ImagePng(png) => {
                    let b64 = base64::engine::general_purpose::STANDARD.encode(png);
                    json!({"type": "image_url", "image_url": {"url": format!("data:image/png;base64,{b64}")}})
                }
            })
            .collect();
        json!({"role": self.role, "content": parts})
    }
}

/// Result of a streamed completion.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StreamOutput {
    pub text: String,
    /// Number of content deltas received; one per token for most servers.
    pub chunks: usize,
    /// The server signalled the end of the message.
    pub finished: bool,
    /// Generation was cut short because the stop predicate fired.
    pub stopped: bool,
}

pub trait ChatClient: Send + Sync {
    /// Identifier recorded in provenance (model name or script label).
    fn id(&self) -> String;

    fn complete(&self, messages: &[ChatMessage]) -> Result<String, ClientError>;

    /// Stream a completion, stopping once `stop` accepts the text so far
    /// or `max_tokens` deltas have arrived. The default buffers a full
    /// completion and truncates it at the first stop point.
    fn complete_streaming(
        &self,
        messages: &[ChatMessage],
        stop: &dyn Fn(&str) -> bool,
        max_tokens: usize,
    ) -> Result<StreamOutput, ClientError> {
        let full = self.complete(messages)?;
        let mut out = StreamOutput::default();
        for ch in full.chars() {
            if out.chunks == max_tokens {
                return Ok(out);
            }
            out.text.push(ch);
            out.chunks += 1;
            if stop(&out.text) {
                out.stopped = true;
                return Ok(out);
            }
        }
        out.finished = true;
        Ok(out)
    }
}

/// Endpoint settings. The auth token is never stored here, only the name
/// of the environment variable that holds it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    /// Base URL; `/chat/completions` is appended unless already present.
    pub endpoint: String,
    pub model: String,
    pub auth_token_env: Option<String>,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    pub max_attempts: u32,
    pub backoff_ms: u64,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            endpoint: "http://127.0.0.1:8000/v1".into(),
            model: String::new(),
            auth_token_env: None,
            timeout_secs: 120,
            max_in_flight: 4,
            max_attempts: 3,
            backoff_ms: 500,
            temperature: None,
            max_tokens: None,
        }
    }
}

impl EndpointConfig {
    pub fn url(&self) -> String {
        let base = self.endpoint.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct InFlight {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.active.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.limit {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.active.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.0.freed.notify_one();
    }
}

pub struct HttpChatClient {
    config: EndpointConfig,
    token: Option<String>,
    agent: ureq::Agent,
    in_flight: InFlight,
}

impl std::fmt::Debug for HttpChatClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpChatClient").field("config", &self.config).finish_non_exhaustive()
    }
}

impl HttpChatClient {
    /// Resolves the auth token from the environment once, at construction.
    pub fn new(config: EndpointConfig) -> Result<Self, ClientError> {
        let token = match &config.auth_token_env {
            Some(var) => Some(std::env::var(var).map_err(|_| ClientError::MissingCredentials(var.clone()))?),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpChatClient {
            in_flight: InFlight {
                limit: config.max_in_flight.max(1),
                active: Mutex::new(0),
                freed: Condvar::new(),
            },
            config,
            token,
            agent,
        })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    fn body(&self, messages: &[ChatMessage], stream: bool, max_tokens: Option<u32>) -> Value {
        let mut body = json!({
            "model": self.config.model,
            "messages": messages.iter().map(ChatMessage::to_json).collect::<Vec<_>>(),
            "stream": stream,
        });
        if let Some(t) = self.config.temperature {
            body["temperature"] = json!(t);
        }
        if let Some(m) = max_tokens.or(self.config.max_tokens) {
            body["max_tokens"] = json!(m);
        }
        body
    }

    fn post(&self, body: &Value) -> Result<ureq::http::Response<ureq::Body>, ClientError> {
        let mut req = self.agent.post(self.config.url()).header("Content-Type", "application/json");
        if let Some(token) = &self.token {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let mut resp = req.send_json(body).map_err(|e| ClientError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(ClientError::Status { status, body });
        }
        Ok(resp)
    }

    fn with_retries<T>(&self, mut attempt: impl FnMut() -> Result<T, ClientError>) -> Result<T, ClientError> {
        let _permit = self.in_flight.acquire();
        let attempts = self.config.max_attempts.max(1);
        let mut delay = Duration::from_millis(self.config.backoff_ms);
        let mut n = 1;
        loop {
            match attempt() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && n < attempts => {
                    log::warn!("request attempt {n}/{attempts} failed: {e}; retrying in {delay:?}");
                    std::thread::sleep(delay);
                    delay *= 2;
                    n += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

fn message_text(v: &Value) -> Option<&str> {
    v.pointer("/choices/0/message/content").and_then(Value::as_str)
}

impl ChatClient for HttpChatClient {
    fn id(&self) -> String {
        self.config.model.clone()
    }

    fn complete(&self, messages: &[ChatMessage]) -> Result<String, ClientError> {
        let body = self.body(messages, false, None);
        self.with_retries(|| {
            let mut resp = self.post(&body)?;
            let v: Value = resp
                .body_mut()
                .read_json()
                .map_err(|e| ClientError::Malformed(e.to_string()))?;
            message_text(&v)
                .map(str::to_string)
                .ok_or_else(|| ClientError::Malformed(format!("no message content in {v}")))
        })
    }

    fn complete_streaming(
        &self,
        messages: &[ChatMessage],
        stop: &dyn Fn(&str) -> bool,
        max_tokens: usize,
    ) -> Result<StreamOutput, ClientError> {
        let body = self.body(messages, true, u32::try_from(max_tokens).ok());
        self.with_retries(|| {
            let mut resp = self.post(&body)?;
            let reader = BufReader::new(resp.body_mut().as_reader());
            let mut out = StreamOutput::default();
            for line in reader.lines() {
                let line = line.map_err(|e| ClientError::Transport(e.to_string()))?;
                let Some(data) = line.strip_prefix("data:") else { continue };
                let data = data.trim();
                if data == "[DONE]" {
                    out.finished = true;
                    break;
                }
                let v: Value = serde_json::from_str(data).map_err(|e| ClientError::Malformed(e.to_string()))?;
                if let Some(delta) = v.pointer("/choices/0/delta/content").and_then(Value::as_str) {
                    if !delta.is_empty() {
                        out.text.push_str(delta);
                        out.chunks += 1;
                        // Dropping the response closes the stream early.
                        if stop(&out.text) {
                            out.stopped = true;
                            return Ok(out);
                        }
                        if out.chunks >= max_tokens {
                            return Ok(out);
                        }
                    }
                }
                if v.pointer("/choices/0/finish_reason").is_some_and(|f| !f.is_null()) {
                    out.finished = true;
                }
            }
            Ok(out)
        })
    }
}

/// A client backed by a closure; used for fixtures and dry runs.
pub struct FnChatClient<F> {
    id: String,
    respond: F,
}

impl<F> FnChatClient<F>
where
    F: Fn(&[ChatMessage]) -> Result<String, ClientError> + Send + Sync,
{
    pub fn new(id: impl Into<String>, respond: F) -> Self {
        FnChatClient { id: id.into(), respond }
    }
}

impl<F> ChatClient for FnChatClient<F>
where
    F: Fn(&[ChatMessage]) -> Result<String, ClientError> + Send + Sync,
{
    fn id(&self) -> String {
        self.id.clone()
    }

    fn complete(&self, messages: &[ChatMessage]) -> Result<String, ClientError> {
        (self.respond)(messages)
    }
}
