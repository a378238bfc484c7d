//! Chat-completion HTTP client used as a remote policy and as an answer judge.

use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::warn;

use crate::policy::{GenerateParams, Generation, PolicyClient, PolicyError};
use crate::reward::{AnswerJudge, RewardError};
use crate::toolbox::{estimate_text_tokens, ImageStore};
use crate::trajectory::{ContentPart, Message, Role, StateView};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EndpointConfig {
    /// Full URL of the chat-completions route.
    pub url: String,
    pub model: String,
    /// Name of the environment variable holding a bearer token.
    pub api_key_env: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub backoff_max_ms: u64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            url: "http://127.0.0.1:8000/v1/chat/completions".to_string(),
            model: "policy".to_string(),
            api_key_env: "ZOOMTRACE_API_KEY".to_string(),
            timeout_ms: 120_000,
            max_retries: 3,
            backoff_base_ms: 500,
            backoff_max_ms: 8_000,
        }
    }
}

impl EndpointConfig {
    /// Delay before retry number `attempt` (0-based).
    pub fn backoff(&self, attempt: u32) -> Duration {
        let ms = self
            .backoff_base_ms
            .saturating_mul(1u64 << attempt.min(30))
            .min(self.backoff_max_ms);
        Duration::from_millis(ms)
    }
}

fn role_name(role: Role) -> &'static str {
    match role {
        Role::System => "system",
        Role::Assistant => "assistant",
        // Tool crops go back to the model as user turns carrying images.
        Role::User | Role::ToolObservation => "user",
    }
}

fn encode_part(part: &ContentPart, images: &ImageStore) -> Result<Value, PolicyError> {
    Ok(match part {
        ContentPart::Text { text } => json!({ "type": "text", "text": text }),
        ContentPart::Image { image_ref } => {
            let img = images
                .get(image_ref)
                .ok_or_else(|| PolicyError::Protocol(format!("image '{image_ref}' not in store")))?;
            let b64 = base64::engine::general_purpose::STANDARD.encode(img.encode_png());
            json!({ "type": "image_url", "image_url": { "url": format!("data:image/png;base64,{b64}") } })
        }
    })
}

fn encode_message(m: &Message, images: &ImageStore) -> Result<Value, PolicyError> {
    let content = m
        .content
        .iter()
        .map(|p| encode_part(p, images))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(json!({ "role": role_name(m.role), "content": content }))
}

/// Request body for one generation.
pub fn build_request(
    model: &str,
    view: &StateView,
    images: &ImageStore,
    params: &GenerateParams,
) -> Result<Value, PolicyError> {
    let messages = view
        .messages
        .iter()
        .map(|m| encode_message(m, images))
        .collect::<Result<Vec<_>, _>>()?;
    let mut body = json!({
        "model": model,
        "messages": messages,
        "stop": params.stop,
        "temperature": params.temperature,
    });
    if let Some(seed) = params.seed {
        body["seed"] = json!(seed);
    }
    if let Some(max) = params.max_tokens {
        body["max_tokens"] = json!(max);
    }
    Ok(body)
}

/// Pulls the completion text and token usage out of a response body.
pub fn parse_response(body: &str) -> Result<(String, Option<usize>), PolicyError> {
    let v: Value = serde_json::from_str(body).map_err(|e| PolicyError::Protocol(format!("invalid JSON: {e}")))?;
    let content = &v["choices"][0]["message"]["content"];
    let text = match content {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p["text"].as_str())
            .collect::<Vec<_>>()
            .join(""),
        _ => return Err(PolicyError::Protocol("missing choices[0].message.content".into())),
    };
    let usage = v["usage"]["completion_tokens"].as_u64().map(|n| n as usize);
    Ok((text, usage))
}

enum Attempt {
    Done(String),
    Retry(PolicyError),
    Fatal(PolicyError),
}

/// Blocking chat-completion client with retries and exponential backoff.
#[derive(Debug, Clone)]
pub struct ChatClient {
    cfg: EndpointConfig,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

impl ChatClient {
    pub fn new(cfg: EndpointConfig) -> Result<Self, PolicyError> {
        let api_key = std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty());
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| PolicyError::Transport(e.to_string()))?;
        Ok(Self { cfg, api_key, http })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    fn attempt(&self, body: &Value) -> Attempt {
        let mut req = self.http.post(&self.cfg.url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        match req.send() {
            Err(e) if e.is_timeout() => Attempt::Retry(PolicyError::Timeout),
            Err(e) => Attempt::Retry(PolicyError::Transport(e.to_string())),
            Ok(resp) => {
                let status = resp.status();
                let text = match resp.text() {
                    Ok(t) => t,
                    Err(e) if e.is_timeout() => return Attempt::Retry(PolicyError::Timeout),
                    Err(e) => return Attempt::Retry(PolicyError::Transport(e.to_string())),
                };
                if status.is_success() {
                    Attempt::Done(text)
                } else if status.is_server_error() || status.as_u16() == 429 {
                    Attempt::Retry(PolicyError::Transport(format!("HTTP {status}")))
                } else {
                    Attempt::Fatal(PolicyError::Protocol(format!("HTTP {status}: {text}")))
                }
            }
        }
    }

    /// Posts `body`, retrying transient failures. Returns the response body
    /// and the number of retries used.
    pub fn post(&self, body: &Value) -> Result<(String, u32), PolicyError> {
        let mut retries = 0;
        loop {
            match self.attempt(body) {
                Attempt::Done(text) => return Ok((text, retries)),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(e) if retries < self.cfg.max_retries => {
                    let wait = self.cfg.backoff(retries);
                    warn!(retry = retries + 1, error = %e, wait_ms = wait.as_millis() as u64, "retrying chat completion");
                    std::thread::sleep(wait);
                    retries += 1;
                }
                Attempt::Retry(e) => return Err(e),
            }
        }
    }

    pub fn complete(&self, view: &StateView, images: &ImageStore, params: &GenerateParams) -> Result<Generation, PolicyError> {
        let body = build_request(&self.cfg.model, view, images, params)?;
        let (raw, retries) = self.post(&body)?;
        let (text, usage) = parse_response(&raw)?;
        let (token_len, estimated) = match usage {
            Some(n) => (n, false),
            None => (estimate_text_tokens(&text), true),
        };
        Ok(Generation {
            token_len: if text.is_empty() { token_len } else { token_len.max(1) },
            text,
            estimated,
            retries,
        })
    }
}

/// A policy served over the chat-completion protocol.
#[derive(Debug, Clone)]
pub struct RemotePolicy {
    client: ChatClient,
}

impl RemotePolicy {
    pub fn new(cfg: EndpointConfig) -> Result<Self, PolicyError> {
        Ok(Self { client: ChatClient::new(cfg)? })
    }
}

impl PolicyClient for RemotePolicy {
    fn generate(&self, view: &StateView, images: &ImageStore, params: &GenerateParams) -> Result<Generation, PolicyError> {
        self.client.complete(view, images, params)
    }
}

/// Asks a chat model whether an answer matches the reference.
#[derive(Debug, Clone)]
pub struct ChatJudge {
    client: ChatClient,
}

const JUDGE_SYSTEM: &str = "You grade answers. Reply with exactly one word: yes if the candidate answer means the same as the reference answer, otherwise no.";

impl ChatJudge {
    pub fn new(cfg: EndpointConfig) -> Result<Self, PolicyError> {
        Ok(Self { client: ChatClient::new(cfg)? })
    }
}

impl AnswerJudge for ChatJudge {
    fn judge(&self, question: &str, answer: &str, gold: &str) -> Result<bool, RewardError> {
        let view = StateView {
            messages: vec![
                Message::text(Role::System, JUDGE_SYSTEM),
                Message::text(
                    Role::User,
                    format!("Question: {question}\nReference answer: {gold}\nCandidate answer: {answer}"),
                ),
            ],
        };
        let params = GenerateParams {
            stop: Vec::new(),
            temperature: 0.0,
            seed: Some(0),
            max_tokens: Some(4),
        };
        let g = self
            .client
            .complete(&view, &ImageStore::new(), &params)
            .map_err(|e| RewardError::JudgeUnavailable(e.to_string()))?;
        Ok(g.text.trim().to_ascii_lowercase().starts_with("yes"))
    }
}
