//! Blocking HTTP completion client with retries, audit log and bounded
//! concurrency.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::PromptError;

pub trait LlmClient: Sync {
    fn complete(&self, prompt: &str) -> Result<String, PromptError>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmConfig {
    pub endpoint: String,
    pub model: Option<String>,
    pub timeout_secs: u64,
    pub max_attempts: usize,
    /// Delay before retry `k` (1-based) is `backoff_ms * 2^(k-1)`.
    pub backoff_ms: u64,
    pub concurrency: usize,
    pub auth_header: Option<String>,
    /// Environment variable holding the value of `auth_header`.
    pub auth_env: Option<String>,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8080/v1/completions".into(),
            model: None,
            timeout_secs: 60,
            max_attempts: 3,
            backoff_ms: 500,
            concurrency: 4,
            auth_header: None,
            auth_env: None,
        }
    }
}

/// One line of the audit log per HTTP attempt. `status` is 0 when no
/// response arrived.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub ts_ms: u128,
    pub prompt_sha256: String,
    pub attempt: usize,
    pub status: u16,
    pub latency_ms: u128,
}

pub struct HttpLlmClient {
    config: LlmConfig,
    http: reqwest::blocking::Client,
    auth: Option<(String, String)>,
    audit: Option<Mutex<File>>,
}

enum Attempt {
    Done(String),
    Retry(PromptError),
    Fail(PromptError),
}

impl HttpLlmClient {
    pub fn new(config: LlmConfig) -> Result<Self, PromptError> {
        let auth = match (&config.auth_header, &config.auth_env) {
            (Some(h), Some(var)) => {
                let v = std::env::var(var).map_err(|_| PromptError::MissingEnv(var.clone()))?;
                Some((h.clone(), v))
            }
            _ => None,
        };
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| PromptError::Network(e.to_string()))?;
        Ok(Self {
            config,
            http,
            auth,
            audit: None,
        })
    }

    /// Appends one JSON line per attempt to `path`.
    pub fn with_audit(mut self, path: &Path) -> Result<Self, PromptError> {
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|source| PromptError::Io {
                path: path.display().to_string(),
                source,
            })?;
        self.audit = Some(Mutex::new(f));
        Ok(self)
    }

    fn audit(&self, rec: &AuditRecord) {
        if let Some(f) = &self.audit {
            let mut f = f.lock().expect("audit lock");
            if let Err(e) = writeln!(f, "{}", serde_json::to_string(rec).expect("serializable")) {
                log::warn!("audit write failed: {e}");
            }
        }
    }

    fn attempt(&self, prompt: &str) -> (u16, Attempt) {
        let mut body = json!({ "prompt": prompt });
        if let Some(m) = &self.config.model {
            body["model"] = json!(m);
        }
        let mut req = self.http.post(&self.config.endpoint).json(&body);
        if let Some((h, v)) = &self.auth {
            req = req.header(h.as_str(), v.as_str());
        }
        let resp = match req.send() {
            Ok(r) => r,
            Err(e) => return (0, Attempt::Retry(PromptError::Network(e.to_string()))),
        };
        let status = resp.status().as_u16();
        let text = resp.text().unwrap_or_default();
        let outcome = if status == 429 || (500..600).contains(&status) {
            Attempt::Retry(PromptError::Http { status, body: text })
        } else if !(200..300).contains(&status) {
            Attempt::Fail(PromptError::Http { status, body: text })
        } else {
            match serde_json::from_str::<Value>(&text)
                .ok()
                .as_ref()
                .and_then(completion_text)
            {
                Some(t) => Attempt::Done(t),
                None => Attempt::Fail(PromptError::Response(text)),
            }
        };
        (status, outcome)
    }
}

/// Accepts `{"text"}`, `{"choices":[{"text"}]}` and
/// `{"choices":[{"message":{"content"}}]}`.
pub fn completion_text(v: &Value) -> Option<String> {
    if let Some(t) = v.get("text").and_then(Value::as_str) {
        return Some(t.to_string());
    }
    let first = v.get("choices")?.get(0)?;
    first
        .get("text")
        .or_else(|| first.get("message").and_then(|m| m.get("content")))
        .and_then(Value::as_str)
        .map(String::from)
}

impl LlmClient for HttpLlmClient {
    fn complete(&self, prompt: &str) -> Result<String, PromptError> {
        let digest = hex::encode(Sha256::digest(prompt.as_bytes()));
        let attempts = self.config.max_attempts.max(1);
        let mut last = PromptError::Network("no attempt made".into());
        for attempt in 1..=attempts {
            if attempt > 1 {
                thread::sleep(Duration::from_millis(
                    self.config.backoff_ms << (attempt - 2),
                ));
            }
            let start = Instant::now();
            let (status, outcome) = self.attempt(prompt);
            self.audit(&AuditRecord {
                ts_ms: SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_millis())
                    .unwrap_or(0),
                prompt_sha256: digest.clone(),
                attempt,
                status,
                latency_ms: start.elapsed().as_millis(),
            });
            match outcome {
                Attempt::Done(t) => return Ok(t),
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(e) => {
                    log::warn!("completion attempt {attempt}/{attempts} failed: {e}");
                    last = e;
                }
            }
        }
        Err(last)
    }
}

/// Completes every prompt with at most `concurrency` requests in flight.
/// Results keep the order of `prompts`.
pub fn complete_all(
    client: &dyn LlmClient,
    prompts: &[String],
    concurrency: usize,
) -> Vec<Result<String, PromptError>> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<String, PromptError>>>> =
        prompts.iter().map(|_| Mutex::new(None)).collect();
    thread::scope(|s| {
        for _ in 0..concurrency.clamp(1, prompts.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= prompts.len() {
                    break;
                }
                let r = client.complete(&prompts[i]);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| {
            m.into_inner()
                .expect("slot lock")
                .expect("every slot filled")
        })
        .collect()
}
