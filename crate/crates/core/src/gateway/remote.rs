use std::sync::Mutex;
use std::time::{Duration, Instant};

use chrono::Utc;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::cache::{CachedExchange, ResponseCache};
use super::{DecisionModel, ModelResponse};
use crate::error::{Error, Result};
use crate::hashing::sha256_hex;

/// Hard cap on sampling temperature.
pub const MAX_TEMPERATURE: f64 = 0.1;

const BODY_EXCERPT: usize = 200;

fn default_timeout_secs() -> f64 {
    60.0
}

fn default_max_retries() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEndpointConfig {
    pub name: String,
    /// Model identifier sent on the wire; defaults to `name`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub base_url: String,
    pub api_key_env: String,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_initial_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requests_per_second: Option<f64>,
}

impl ModelEndpointConfig {
    pub fn model_id(&self) -> &str {
        self.model.as_deref().unwrap_or(&self.name)
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::invalid("name", "must not be empty"));
        }
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return Err(Error::invalid("base_url", "must be an http(s) URL"));
        }
        if self.api_key_env.trim().is_empty() {
            return Err(Error::invalid("api_key_env", "must name an environment variable"));
        }
        if !(0.0..=MAX_TEMPERATURE).contains(&self.temperature) {
            return Err(Error::invalid(
                "temperature",
                format!("{} is outside [0, {MAX_TEMPERATURE}]", self.temperature),
            ));
        }
        if self.max_tokens == 0 {
            return Err(Error::invalid("max_tokens", "must be positive"));
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(Error::invalid("timeout_secs", "must be positive"));
        }
        if let Some(rps) = self.requests_per_second {
            if !(rps > 0.0 && rps.is_finite()) {
                return Err(Error::invalid("requests_per_second", "must be positive"));
            }
        }
        Ok(())
    }
}

/// Stable hash of everything that determines a response.
pub fn request_fingerprint(model: &str, prompt: &str, temperature: f64, max_tokens: u32) -> String {
    let canonical = json!({
        "max_tokens": max_tokens,
        "model": model,
        "prompt": prompt,
        "temperature": temperature,
    });
    sha256_hex(canonical.to_string().as_bytes())
}

/// Blocking token bucket shared by all threads querying one endpoint.
#[derive(Debug)]
pub struct TokenBucket {
    rate: f64,
    capacity: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    pub fn new(per_second: f64) -> Self {
        let capacity = per_second.max(1.0);
        TokenBucket {
            rate: per_second,
            capacity,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut state = self.state.lock().unwrap_or_else(|p| p.into_inner());
                let now = Instant::now();
                let refill = now.duration_since(state.1).as_secs_f64() * self.rate;
                state.0 = (state.0 + refill).min(self.capacity);
                state.1 = now;
                if state.0 >= 1.0 {
                    state.0 -= 1.0;
                    return;
                }
                Duration::from_secs_f64((1.0 - state.0) / self.rate)
            };
            std::thread::sleep(wait);
        }
    }
}

/// Chat-completion client with retries, rate limiting and a response cache.
pub struct RemoteChatModel {
    config: ModelEndpointConfig,
    agent: ureq::Agent,
    cache: Option<ResponseCache>,
    limiter: Option<TokenBucket>,
}

impl RemoteChatModel {
    pub fn new(config: ModelEndpointConfig, cache: Option<ResponseCache>) -> Result<Self> {
        config.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout()))
            .http_status_as_error(false)
            .build()
            .into();
        let limiter = config.requests_per_second.map(TokenBucket::new);
        Ok(RemoteChatModel {
            config,
            agent,
            cache,
            limiter,
        })
    }

    pub fn config(&self) -> &ModelEndpointConfig {
        &self.config
    }

    fn request_body(&self, prompt: &str) -> Value {
        json!({
            "model": self.config.model_id(),
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
        })
    }

    fn send_once(&self, url: &str, key: &str, body: &Value) -> Result<String> {
        if let Some(limiter) = &self.limiter {
            limiter.acquire();
        }
        let result = self
            .agent
            .post(url)
            .header("Authorization", &format!("Bearer {key}"))
            .send_json(body);
        let mut response = match result {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Err(Error::Timeout(self.config.timeout())),
            Err(ureq::Error::Io(e)) if e.kind() == std::io::ErrorKind::TimedOut => {
                return Err(Error::Timeout(self.config.timeout()))
            }
            Err(e) => return Err(Error::Transport(e.to_string())),
        };
        let status = response.status().as_u16();
        let text = match response.body_mut().read_to_string() {
            Ok(t) => t,
            Err(ureq::Error::Timeout(_)) => return Err(Error::Timeout(self.config.timeout())),
            Err(e) => return Err(Error::Transport(e.to_string())),
        };
        if !(200..300).contains(&status) {
            let body: String = text.chars().take(BODY_EXCERPT).collect();
            return Err(Error::Status { status, body });
        }
        let parsed: Value =
            serde_json::from_str(&text).map_err(|e| Error::Transport(format!("response is not JSON: {e}")))?;
        parsed
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| Error::Transport("response has no choices[0].message.content".into()))
    }
}

impl DecisionModel for RemoteChatModel {
    fn name(&self) -> &str {
        &self.config.name
    }

    fn query(&self, prompt: &str) -> Result<ModelResponse> {
        if prompt.trim().is_empty() {
            return Err(Error::invalid("prompt", "must not be empty"));
        }
        let fingerprint = request_fingerprint(
            self.config.model_id(),
            prompt,
            self.config.temperature,
            self.config.max_tokens,
        );
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get(&fingerprint)? {
                return Ok(ModelResponse {
                    raw_text: hit.response,
                    latency: Duration::from_millis(hit.latency_ms),
                    cached: true,
                    request_fingerprint: fingerprint,
                });
            }
        }
        let key = std::env::var(&self.config.api_key_env)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| Error::MissingApiKey(self.config.api_key_env.clone()))?;
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let body = self.request_body(prompt);
        let mut attempt = 0u32;
        loop {
            let started = Instant::now();
            match self.send_once(&url, &key, &body) {
                Ok(raw_text) => {
                    let latency = started.elapsed();
                    if let Some(cache) = &self.cache {
                        cache.put(
                            &fingerprint,
                            &CachedExchange {
                                request: body.clone(),
                                response: raw_text.clone(),
                                latency_ms: latency.as_millis() as u64,
                                timestamp: Utc::now(),
                            },
                        )?;
                    }
                    return Ok(ModelResponse {
                        raw_text,
                        latency,
                        cached: false,
                        request_fingerprint: fingerprint,
                    });
                }
                Err(e) if e.is_retryable() && attempt < self.config.max_retries => {
                    let delay = Duration::from_millis(self.config.backoff_initial_ms.saturating_mul(1 << attempt.min(16)));
                    log::warn!("{}: attempt {} failed ({e}); retrying in {delay:?}", self.config.name, attempt + 1);
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                Err(e) if e.is_retryable() && self.config.max_retries > 0 => {
                    return Err(Error::RetriesExhausted {
                        attempts: attempt + 1,
                        last: Box::new(e),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn metadata(&self) -> Value {
        json!({
            "name": self.config.name,
            "model": self.config.model_id(),
            "base_url": self.config.base_url,
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
            "other_decoding_params": "none sent",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn config() -> ModelEndpointConfig {
        ModelEndpointConfig {
            name: "m".into(),
            model: None,
            base_url: "http://127.0.0.1:9".into(),
            api_key_env: "FLIPAUDIT_TEST_NO_SUCH_KEY".into(),
            temperature: 0.1,
            max_tokens: 500,
            timeout_secs: 1.0,
            max_retries: 3,
            backoff_initial_ms: 1,
            requests_per_second: None,
        }
    }

    #[test]
    fn temperature_cap() {
        let mut c = config();
        assert!(c.validate().is_ok());
        c.temperature = 0.2;
        assert!(c.validate().is_err());
    }

    #[test]
    fn fingerprint_tracks_decoding_params() {
        let a = request_fingerprint("m", "p", 0.1, 500);
        assert_eq!(a, request_fingerprint("m", "p", 0.1, 500));
        assert_ne!(a, request_fingerprint("m", "p", 0.0, 500));
        assert_ne!(a, request_fingerprint("m", "p", 0.1, 400));
        assert_ne!(a, request_fingerprint("m2", "p", 0.1, 500));
    }

    #[test]
    fn missing_key_is_reported() {
        let model = RemoteChatModel::new(config(), None).unwrap();
        match model.query("hello") {
            Err(Error::MissingApiKey(name)) => assert_eq!(name, "FLIPAUDIT_TEST_NO_SUCH_KEY"),
            other => panic!("{other:?}"),
        }
        assert!(model.query("  ").is_err());
    }

    #[test]
    fn bucket_limits_rate() {
        let bucket = TokenBucket::new(50.0);
        let start = Instant::now();
        for _ in 0..60 {
            bucket.acquire();
        }
        assert!(start.elapsed() >= Duration::from_millis(150));
    }
}
