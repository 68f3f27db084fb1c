//! Chat-completion client for the dialogue generator, with retries,
//! exponential backoff, a global rate limit and an offline mock mode.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::mock::mock_generate;
use crate::error::excerpt;
use crate::{Error, Result};

pub const ENV_ENDPOINT: &str = "ECGLM_LLM_ENDPOINT";
pub const ENV_MODEL: &str = "ECGLM_LLM_MODEL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientConfig {
    /// Chat-completion URL; required unless `mock`.
    pub endpoint: Option<String>,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub mock: bool,
    pub max_attempts: usize,
    /// First retry delay; doubles on each further attempt.
    pub backoff_ms: u64,
    /// Minimum spacing between requests across all threads.
    pub min_interval_ms: u64,
    pub timeout_s: u64,
    /// Requests in flight for batch generation.
    pub concurrency: usize,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            endpoint: None,
            model: "gemini-3-flash-preview".into(),
            api_key_env: "ECGLM_LLM_API_KEY".into(),
            mock: false,
            max_attempts: 3,
            backoff_ms: 500,
            min_interval_ms: 0,
            timeout_s: 60,
            concurrency: 4,
        }
    }
}

impl ClientConfig {
    pub fn mock() -> Self {
        ClientConfig {
            mock: true,
            ..Self::default()
        }
    }

    /// Endpoint and model from the environment, when set.
    pub fn with_env(mut self) -> Self {
        if let Ok(e) = std::env::var(ENV_ENDPOINT) {
            self.endpoint = Some(e);
        }
        if let Ok(m) = std::env::var(ENV_MODEL) {
            self.model = m;
        }
        self
    }
}

pub struct LlmClient {
    cfg: ClientConfig,
    http: Option<reqwest::blocking::Client>,
    last_request: Mutex<Option<Instant>>,
}

enum Attempt {
    Done(Result<String>),
    Retry(String),
}

impl LlmClient {
    pub fn new(cfg: ClientConfig) -> Result<Self> {
        if cfg.max_attempts == 0 {
            return Err(Error::invalid("max_attempts", "must be at least 1"));
        }
        let http = if cfg.mock {
            None
        } else {
            if cfg.endpoint.is_none() {
                return Err(Error::invalid("endpoint", format!("no endpoint configured (set {ENV_ENDPOINT} or use mock mode)")));
            }
            let client = reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(cfg.timeout_s))
                .build()
                .map_err(|e| Error::Network {
                    attempts: 0,
                    message: e.to_string(),
                })?;
            Some(client)
        };
        Ok(LlmClient {
            cfg,
            http,
            last_request: Mutex::new(None),
        })
    }

    pub fn config(&self) -> &ClientConfig {
        &self.cfg
    }

    fn throttle(&self) {
        let mut last = self.last_request.lock().unwrap_or_else(|e| e.into_inner());
        let gap = Duration::from_millis(self.cfg.min_interval_ms);
        if let Some(t) = *last {
            let since = t.elapsed();
            if since < gap {
                std::thread::sleep(gap - since);
            }
        }
        *last = Some(Instant::now());
    }

    fn attempt(&self, http: &reqwest::blocking::Client, prompt: &str) -> Attempt {
        self.throttle();
        let body = json!({
            "model": self.cfg.model,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut req = http.post(self.cfg.endpoint.as_deref().unwrap_or_default()).json(&body);
        if let Ok(key) = std::env::var(&self.cfg.api_key_env) {
            req = req.bearer_auth(key);
        }
        let resp = match req.send() {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = resp.status().as_u16();
        let text = match resp.text() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        match status {
            200..=299 => Attempt::Done(extract_content(&text)),
            401 | 403 => Attempt::Done(Err(Error::Auth { status })),
            429 | 500..=599 => Attempt::Retry(format!("HTTP {status}")),
            _ => Attempt::Done(Err(Error::Http {
                status,
                excerpt: excerpt(&text, 200),
            })),
        }
    }

    /// Raw reply text for `prompt`.
    pub fn generate(&self, prompt: &str) -> Result<String> {
        let Some(http) = &self.http else {
            return mock_generate(prompt);
        };
        let mut last_err = String::new();
        for attempt in 0..self.cfg.max_attempts {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(self.cfg.backoff_ms << (attempt - 1)));
            }
            match self.attempt(http, prompt) {
                Attempt::Done(r) => return r,
                Attempt::Retry(msg) => last_err = msg,
            }
        }
        Err(Error::Network {
            attempts: self.cfg.max_attempts,
            message: last_err,
        })
    }

    /// Replies in prompt order, with up to `concurrency` requests in flight.
    pub fn generate_batch(&self, prompts: &[String]) -> Vec<Result<String>> {
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<String>>>> = prompts.iter().map(|_| Mutex::new(None)).collect();
        let workers = self.cfg.concurrency.clamp(1, prompts.len().max(1));
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= prompts.len() {
                        break;
                    }
                    let r = self.generate(&prompts[i]);
                    *slots[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().unwrap_or_else(|e| e.into_inner()).expect("every slot filled"))
            .collect()
    }
}

/// `choices[0].message.content` of a chat-completion response.
fn extract_content(body: &str) -> Result<String> {
    let v: Value = serde_json::from_str(body).map_err(|e| Error::Parse {
        message: e.to_string(),
        excerpt: excerpt(body, 200),
    })?;
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| Error::Parse {
            message: "no choices[0].message.content".into(),
            excerpt: excerpt(body, 200),
        })
}

/// One-shot generation with a fresh client.
pub fn llm_generate(prompt: &str, cfg: &ClientConfig) -> Result<String> {
    LlmClient::new(cfg.clone())?.generate(prompt)
}
