use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Backend, Choice, GenRequest, GenResponse, LlmError, TokenBucket, Usage};

pub const API_KEY_ENV: &str = "DEMO_FORGE_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Retries after the first try.
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 5,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based): exponential growth
    /// capped at `max_delay_ms`, with the upper half randomized.
    pub fn delay(&self, retry: u32, jitter: f64) -> Duration {
        let exp = self
            .base_delay_ms
            .saturating_mul(1u64 << retry.min(20))
            .min(self.max_delay_ms);
        let ms = exp as f64 * (0.5 + 0.5 * jitter.clamp(0.0, 1.0));
        Duration::from_millis(ms as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    pub base_url: String,
    #[serde(default = "default_path")]
    pub path: String,
    pub model: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Client-side rate limit; `None` disables throttling.
    #[serde(default)]
    pub requests_per_minute: Option<u32>,
}

fn default_path() -> String {
    "/v1/completions".to_string()
}

fn default_timeout() -> u64 {
    60
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            path: default_path(),
            model: model.into(),
            timeout_secs: default_timeout(),
            retry: RetryPolicy::default(),
            requests_per_minute: None,
        }
    }
}

/// Client for OpenAI-compatible completion endpoints.
pub struct HttpBackend {
    cfg: HttpConfig,
    id: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    limiter: Option<TokenBucket>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct WireChoice {
    #[serde(default)]
    text: String,
    #[serde(default)]
    finish_reason: Option<String>,
}

impl HttpBackend {
    /// Build a client; the bearer token is read from `DEMO_FORGE_API_KEY`.
    pub fn new(cfg: HttpConfig) -> Result<Self, LlmError> {
        let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::with_key(cfg, key)
    }

    pub fn with_key(cfg: HttpConfig, api_key: Option<String>) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| LlmError::Backend {
                retryable: false,
                status: None,
                message: e.to_string(),
            })?;
        let limiter = cfg
            .requests_per_minute
            .map(|rpm| TokenBucket::new(rpm, rpm.div_ceil(60).max(1)));
        Ok(Self {
            id: format!("http:{}", cfg.model),
            cfg,
            api_key,
            client,
            limiter,
        })
    }

    fn url(&self) -> String {
        format!(
            "{}/{}",
            self.cfg.base_url.trim_end_matches('/'),
            self.cfg.path.trim_start_matches('/')
        )
    }

    fn body(&self, req: &GenRequest) -> serde_json::Value {
        let mut body = json!({
            "model": self.cfg.model,
            "prompt": req.prompt,
            "temperature": req.temperature,
            "max_tokens": req.max_new_tokens,
            "n": req.n_choices,
            "stop": req.stop_sequences,
        });
        if let Some(seed) = req.seed {
            body["seed"] = json!(seed);
        }
        body
    }

    /// One round trip. On a retryable failure also returns a server-requested
    /// wait, if any.
    fn try_once(&self, req: &GenRequest) -> Result<GenResponse, (LlmError, Option<Duration>)> {
        if let Some(l) = &self.limiter {
            l.acquire();
        }
        let mut builder = self.client.post(self.url()).json(&self.body(req));
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder.send().map_err(|e| (transport_error(e), None))?;
        let status = resp.status();
        if !status.is_success() {
            let retry_after = resp
                .headers()
                .get(reqwest::header::RETRY_AFTER)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<u64>().ok())
                .map(Duration::from_secs);
            let code = status.as_u16();
            let message = resp.text().unwrap_or_default();
            let retryable = code == 429 || status.is_server_error();
            return Err((
                LlmError::Backend {
                    retryable,
                    status: Some(code),
                    message,
                },
                retry_after,
            ));
        }
        let text = resp.text().map_err(|e| (transport_error(e), None))?;
        let wire: WireResponse = serde_json::from_str(&text).map_err(|e| {
            (
                LlmError::Backend {
                    retryable: false,
                    status: Some(status.as_u16()),
                    message: format!("malformed response body: {e}"),
                },
                None,
            )
        })?;
        if wire.choices.len() != req.n_choices as usize {
            return Err((
                LlmError::Backend {
                    retryable: false,
                    status: Some(status.as_u16()),
                    message: format!(
                        "expected {} choices, got {}",
                        req.n_choices,
                        wire.choices.len()
                    ),
                },
                None,
            ));
        }
        Ok(GenResponse {
            choices: wire
                .choices
                .into_iter()
                .map(|c| Choice {
                    text: c.text,
                    finish_reason: c.finish_reason,
                })
                .collect(),
            usage: wire.usage,
            backend_id: self.id.clone(),
        })
    }
}

fn transport_error(e: reqwest::Error) -> LlmError {
    if e.is_timeout() {
        LlmError::Timeout
    } else {
        LlmError::Backend {
            retryable: true,
            status: None,
            message: e.to_string(),
        }
    }
}

impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, req: &GenRequest) -> Result<GenResponse, LlmError> {
        let mut retry = 0;
        loop {
            match self.try_once(req) {
                Ok(r) => return Ok(r),
                Err((err, server_wait)) => {
                    if !err.retryable() || retry >= self.cfg.retry.max_retries {
                        return Err(err);
                    }
                    let mut wait = self.cfg.retry.delay(retry, rand::random::<f64>());
                    if let Some(s) = server_wait {
                        wait = wait.max(s.min(Duration::from_millis(self.cfg.retry.max_delay_ms)));
                    }
                    tracing::debug!(retry, ?wait, error = %err, "retrying completion request");
                    std::thread::sleep(wait);
                    retry += 1;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_grows_and_caps() {
        let p = RetryPolicy {
            max_retries: 10,
            base_delay_ms: 100,
            max_delay_ms: 1000,
        };
        assert_eq!(p.delay(0, 1.0), Duration::from_millis(100));
        assert_eq!(p.delay(0, 0.0), Duration::from_millis(50));
        assert_eq!(p.delay(3, 1.0), Duration::from_millis(800));
        assert_eq!(p.delay(4, 1.0), Duration::from_millis(1000));
        assert_eq!(p.delay(63, 1.0), Duration::from_millis(1000));
    }

    #[test]
    fn url_joining() {
        let b = HttpBackend::with_key(HttpConfig::new("http://h:1/", "m"), None).unwrap();
        assert_eq!(b.url(), "http://h:1/v1/completions");
        assert_eq!(b.id(), "http:m");
    }
}
