use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use chrono::Utc;
use serde_json::{json, Value};

use super::{DescribeError, Description, PromptConfig, Provenance, RemoteConfig, Source};
use crate::linearize::LinearizedRecord;

pub const API_KEY_ENV: &str = "FREE_LLM_API_KEY";
pub const BASE_URL_ENV: &str = "FREE_LLM_BASE_URL";

/// Chat-completion client with exponential backoff.
pub struct RemoteClient {
    agent: ureq::Agent,
    api_key: String,
    base_url: String,
    calls: AtomicUsize,
}

enum Attempt {
    Retry(String),
    Fatal(DescribeError),
}

impl RemoteClient {
    pub fn new(remote: &RemoteConfig, api_key: impl Into<String>) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs_f64(remote.timeout_s.max(0.001)))
            .build();
        Self {
            agent,
            api_key: api_key.into(),
            base_url: remote.base_url.trim_end_matches('/').to_string(),
            calls: AtomicUsize::new(0),
        }
    }

    /// Reads the key from `FREE_LLM_API_KEY`; `FREE_LLM_BASE_URL` overrides
    /// the configured base URL when set.
    pub fn from_env(remote: &RemoteConfig) -> Result<Self, DescribeError> {
        let key = std::env::var(API_KEY_ENV).map_err(|_| DescribeError::MissingCredentials(API_KEY_ENV))?;
        let mut remote = remote.clone();
        if let Ok(url) = std::env::var(BASE_URL_ENV) {
            remote.base_url = url;
        }
        Ok(Self::new(&remote, key))
    }

    /// Number of HTTP requests issued so far (including retries).
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn describe(&self, cfg: &PromptConfig, rec: &LinearizedRecord) -> Result<Description, DescribeError> {
        let remote = cfg
            .remote
            .as_ref()
            .ok_or_else(|| DescribeError::Config("missing remote section".into()))?;
        let body = json!({
            "model": remote.model_id,
            "messages": [{"role": "user", "content": cfg.assemble_prompt(rec)}],
        });
        if remote.log_requests {
            log::debug!("POST {}/chat/completions {}", self.base_url, body);
        }
        let mut delay = Duration::from_millis(remote.backoff_ms);
        let attempts = remote.max_retries + 1;
        let mut last = String::new();
        for attempt in 1..=attempts {
            match self.attempt(&body) {
                Ok(text) => {
                    return Ok(Description {
                        text,
                        cache_key: super::cache_key(cfg, rec),
                        provenance: Provenance {
                            source: Source::RemoteLlm,
                            version: remote.model_id.clone(),
                            created: Utc::now(),
                        },
                    })
                }
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => {
                    log::warn!("chat completion attempt {attempt}/{attempts} failed: {msg}");
                    last = msg;
                    if attempt < attempts {
                        std::thread::sleep(delay);
                        delay *= 2;
                    }
                }
            }
        }
        Err(DescribeError::Transport { attempts, message: last })
    }

    fn attempt(&self, body: &Value) -> Result<String, Attempt> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let resp = self
            .agent
            .post(&format!("{}/chat/completions", self.base_url))
            .set("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(body.clone());
        let resp = match resp {
            Ok(r) => r,
            Err(ureq::Error::Status(code, r)) if code == 429 || code >= 500 => {
                return Err(Attempt::Retry(format!("HTTP {code} {}", r.status_text())))
            }
            Err(ureq::Error::Status(code, r)) => {
                return Err(Attempt::Fatal(DescribeError::Protocol(format!(
                    "HTTP {code} {}",
                    r.status_text()
                ))))
            }
            Err(e) => return Err(Attempt::Retry(e.to_string())),
        };
        let v: Value = resp
            .into_json()
            .map_err(|e| Attempt::Fatal(DescribeError::Protocol(format!("invalid JSON: {e}"))))?;
        let text = v["choices"][0]["message"]["content"].as_str().unwrap_or("").trim().to_string();
        if text.is_empty() {
            return Err(Attempt::Fatal(DescribeError::Protocol("empty completion".into())));
        }
        Ok(text)
    }
}
