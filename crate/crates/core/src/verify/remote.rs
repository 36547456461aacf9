//! Chat-completions client.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::VerifyError;
use crate::sampling::GenParams;

pub const DEFAULT_TOKEN_ENV: &str = "KNOWMARK_API_TOKEN";
const COMPLETIONS_PATH: &str = "/v1/chat/completions";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn user(model: &str, prompt: &str, params: &GenParams) -> Self {
        Self {
            model: model.to_string(),
            messages: vec![ChatMessage {
                role: "user".into(),
                content: prompt.to_string(),
            }],
            temperature: params.temperature,
            top_p: params.top_p,
            max_tokens: params.max_tokens,
            seed: Some(params.seed),
        }
    }

    /// Content of the last user message.
    pub fn prompt(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == "user")
            .map(|m| m.content.as_str())
    }

    pub fn params(&self) -> GenParams {
        GenParams {
            temperature: self.temperature,
            top_p: self.top_p,
            max_tokens: self.max_tokens,
            seed: self.seed.unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatChoice {
    pub index: usize,
    pub message: ChatMessage,
    #[serde(default)]
    pub finish_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    #[serde(default)]
    pub model: String,
    pub choices: Vec<ChatChoice>,
}

impl ChatResponse {
    pub fn single(model: &str, content: String) -> Self {
        Self {
            model: model.to_string(),
            choices: vec![ChatChoice {
                index: 0,
                message: ChatMessage {
                    role: "assistant".into(),
                    content,
                },
                finish_reason: Some("stop".into()),
            }],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    /// Either a server root (the completions path is appended) or a full
    /// `.../chat/completions` URL.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub token_env: String,
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub timeout_ms: u64,
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            token_env: DEFAULT_TOKEN_ENV.into(),
            max_retries: 3,
            initial_backoff_ms: 200,
            timeout_ms: 30_000,
        }
    }

    pub fn endpoint(&self) -> String {
        let base = self.base_url.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}{COMPLETIONS_PATH}")
        }
    }
}

#[derive(Debug, Clone)]
pub struct RemoteClient {
    config: RemoteConfig,
    endpoint: String,
    token: Option<String>,
    agent: ureq::Agent,
}

enum Attempt {
    Done(String),
    Retry(VerifyError),
    Fatal(VerifyError),
}

impl RemoteClient {
    pub fn new(config: RemoteConfig) -> Result<Self, VerifyError> {
        if config.base_url.is_empty() {
            return Err(VerifyError::IncompleteConfig("base URL is empty".into()));
        }
        if config.model.is_empty() {
            return Err(VerifyError::IncompleteConfig("model name is empty".into()));
        }
        let token = std::env::var(&config.token_env)
            .ok()
            .filter(|t| !t.is_empty());
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .build()
            .into();
        Ok(Self {
            endpoint: config.endpoint(),
            config,
            token,
            agent,
        })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    pub fn complete(&self, prompt: &str, params: &GenParams) -> Result<String, VerifyError> {
        let request = ChatRequest::user(&self.config.model, prompt, params);
        let mut backoff = Duration::from_millis(self.config.initial_backoff_ms);
        let attempts = self.config.max_retries + 1;
        let mut last = VerifyError::TargetUnreachable("no attempt made".into());
        for attempt in 1..=attempts {
            match self.attempt(&request) {
                Attempt::Done(text) => return Ok(text),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(e) => {
                    log::debug!("attempt {attempt}/{attempts} failed: {e}");
                    last = e;
                    if attempt < attempts {
                        thread::sleep(backoff);
                        backoff *= 2;
                    }
                }
            }
        }
        Err(match last {
            VerifyError::RateLimited { .. } => VerifyError::RateLimited { attempts },
            e => e,
        })
    }

    fn attempt(&self, request: &ChatRequest) -> Attempt {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(t) = &self.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        let mut resp = match req.send_json(request) {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(VerifyError::TargetUnreachable(e.to_string())),
        };
        let status = resp.status().as_u16();
        let body = match resp.body_mut().read_to_string() {
            Ok(b) => b,
            Err(e) => return Attempt::Retry(VerifyError::TargetUnreachable(e.to_string())),
        };
        match status {
            200..=299 => match parse_response(&body) {
                Ok(text) => Attempt::Done(text),
                Err(e) => Attempt::Fatal(e),
            },
            429 => Attempt::Retry(VerifyError::RateLimited { attempts: 0 }),
            500..=599 => Attempt::Retry(VerifyError::TargetUnreachable(format!(
                "HTTP {status}: {}",
                truncate(&body)
            ))),
            _ => Attempt::Fatal(VerifyError::ProtocolError(format!(
                "HTTP {status}: {}",
                truncate(&body)
            ))),
        }
    }
}

fn truncate(s: &str) -> String {
    s.chars().take(200).collect()
}

/// Text of the first choice of a chat-completions response body.
pub(crate) fn parse_response(body: &str) -> Result<String, VerifyError> {
    let resp: ChatResponse = serde_json::from_str(body)
        .map_err(|e| VerifyError::ProtocolError(format!("bad response body: {e}")))?;
    resp.choices
        .into_iter()
        .next()
        .map(|c| c.message.content)
        .ok_or_else(|| VerifyError::ProtocolError("response has no choices".into()))
}
