//! OpenAI-style chat-completion backend.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{GatewayError, Judge, JudgeCall};

/// One chat-completion endpoint. The API key is read from the environment
/// variable named by `api_key_env` at call time; keys never live in config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    /// Base URL; `/chat/completions` is appended.
    pub base_url: String,
    /// Model name sent to the endpoint (defaults to the handle name).
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub api_key_env: Option<String>,
    /// Minimum spacing between requests to this endpoint.
    #[serde(default)]
    pub min_interval_ms: u64,
    #[serde(default = "default_request_timeout")]
    pub timeout_ms: u64,
}

fn default_request_timeout() -> u64 {
    120_000
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            initial_backoff_ms: 500,
        }
    }
}

/// Global in-flight budget plus per-key request spacing.
#[derive(Debug)]
pub struct Throttle {
    max_in_flight: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
    last_call: Mutex<HashMap<String, Instant>>,
}

pub struct Permit<'a>(&'a Throttle);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().expect("throttle lock");
        *n -= 1;
        self.0.freed.notify_one();
    }
}

impl Throttle {
    pub fn new(max_in_flight: usize) -> Self {
        Self {
            max_in_flight: max_in_flight.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            last_call: Mutex::new(HashMap::new()),
        }
    }

    pub fn acquire(&self, key: &str, min_interval: Duration) -> Permit<'_> {
        {
            let mut n = self.in_flight.lock().expect("throttle lock");
            while *n >= self.max_in_flight {
                n = self.freed.wait(n).expect("throttle lock");
            }
            *n += 1;
        }
        if !min_interval.is_zero() {
            let wait = {
                let mut last = self.last_call.lock().expect("throttle lock");
                let now = Instant::now();
                let slot = match last.get(key) {
                    Some(prev) if *prev + min_interval > now => *prev + min_interval,
                    _ => now,
                };
                last.insert(key.to_string(), slot);
                slot.saturating_duration_since(now)
            };
            thread::sleep(wait);
        }
        Permit(self)
    }

    pub fn in_flight(&self) -> usize {
        *self.in_flight.lock().expect("throttle lock")
    }
}

pub struct HttpGateway {
    endpoints: BTreeMap<String, EndpointConfig>,
    retry: RetryPolicy,
    throttle: Throttle,
}

enum Failure {
    Retryable(String),
    Fatal(GatewayError),
}

impl HttpGateway {
    pub fn new(endpoints: BTreeMap<String, EndpointConfig>, retry: RetryPolicy, max_in_flight: usize) -> Self {
        Self {
            endpoints,
            retry,
            throttle: Throttle::new(max_in_flight),
        }
    }

    fn endpoint(&self, call: &JudgeCall) -> Result<&EndpointConfig, GatewayError> {
        let key = if call.model.endpoint_config_key.is_empty() {
            &call.model.name
        } else {
            &call.model.endpoint_config_key
        };
        self.endpoints.get(key).ok_or_else(|| GatewayError::Config {
            model: call.model.name.clone(),
            message: format!("no endpoint configured under `{key}`"),
        })
    }

    fn attempt(&self, ep: &EndpointConfig, call: &JudgeCall, body: &Value, key: Option<&str>) -> Result<String, Failure> {
        let url = format!("{}/chat/completions", ep.base_url.trim_end_matches('/'));
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_millis(ep.timeout_ms))
            .build();
        let mut req = agent.post(&url).set("Content-Type", "application/json");
        if let Some(k) = key {
            req = req.set("Authorization", &format!("Bearer {k}"));
        }
        let model = call.model.name.clone();
        match req.send_json(body.clone()) {
            Ok(resp) => {
                let v: Value = resp.into_json().map_err(|e| {
                    Failure::Fatal(GatewayError::Response {
                        model: model.clone(),
                        message: e.to_string(),
                    })
                })?;
                v.pointer("/choices/0/message/content")
                    .and_then(Value::as_str)
                    .map(str::to_string)
                    .ok_or_else(|| {
                        Failure::Fatal(GatewayError::Response {
                            model,
                            message: "missing choices[0].message.content".into(),
                        })
                    })
            }
            Err(ureq::Error::Status(status, resp)) => {
                let text = resp.into_string().unwrap_or_default();
                if status >= 500 || status == 429 {
                    Err(Failure::Retryable(format!("HTTP {status}: {text}")))
                } else {
                    Err(Failure::Fatal(GatewayError::Http {
                        model,
                        status,
                        body: text,
                    }))
                }
            }
            Err(ureq::Error::Transport(t)) => Err(Failure::Retryable(t.to_string())),
        }
    }
}

impl Judge for HttpGateway {
    fn complete(&self, call: &JudgeCall) -> Result<String, GatewayError> {
        let ep = self.endpoint(call)?;
        let api_key = match &ep.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| GatewayError::Config {
                model: call.model.name.clone(),
                message: format!("environment variable `{var}` is not set"),
            })?),
            None => None,
        };
        let mut body = json!({
            "model": ep.model.clone().unwrap_or_else(|| call.model.name.clone()),
            "messages": [{"role": "user", "content": call.prompt}],
            "temperature": call.params.temperature,
            "max_tokens": call.params.max_tokens,
        });
        if let Some(seed) = call.params.seed {
            body["seed"] = json!(seed);
        }
        let attempts = self.retry.attempts.max(1);
        let mut backoff = Duration::from_millis(self.retry.initial_backoff_ms);
        let mut last = String::new();
        for i in 0..attempts {
            if i > 0 {
                log::warn!("{}: retrying after {:?} ({last})", call.model.name, backoff);
                thread::sleep(backoff);
                backoff *= 2;
            }
            let _permit = self
                .throttle
                .acquire(&call.model.name, Duration::from_millis(ep.min_interval_ms));
            match self.attempt(ep, call, &body, api_key.as_deref()) {
                Ok(text) => return Ok(text),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retryable(msg)) => last = msg,
            }
        }
        Err(GatewayError::Transport {
            model: call.model.name.clone(),
            attempts,
            message: last,
        })
    }
}
