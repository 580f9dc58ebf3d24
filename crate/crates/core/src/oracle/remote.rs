use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::server::{QueryRequest, API_KEY_ENV, API_KEY_HEADER};
use super::{Oracle, Scores, NUM_CLASSES};
use crate::raster::RasterImage;
use crate::{Error, Result};

/// JSON keys of the remote response.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldMapping {
    pub confidence: String,
    pub stealthiness: String,
    pub probabilities: String,
}

impl Default for FieldMapping {
    fn default() -> Self {
        Self {
            confidence: "confidence".into(),
            stealthiness: "stealthiness".into(),
            probabilities: "probabilities".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    /// Base URL; requests go to `<url>/query`.
    pub url: String,
    #[serde(default)]
    pub fields: FieldMapping,
    #[serde(default = "default_retries")]
    pub max_retries: usize,
    /// First backoff delay; doubles on every retry.
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Upper bound on simultaneous in-flight requests across all attacks.
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
}

fn default_retries() -> usize {
    3
}
fn default_backoff_ms() -> u64 {
    500
}
fn default_timeout_ms() -> u64 {
    30_000
}
fn default_max_in_flight() -> usize {
    4
}

impl RemoteConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            fields: FieldMapping::default(),
            max_retries: default_retries(),
            backoff_ms: default_backoff_ms(),
            timeout_ms: default_timeout_ms(),
            max_in_flight: default_max_in_flight(),
        }
    }

    /// Delays slept before each retry: `backoff, 2·backoff, 4·backoff, ...`.
    pub fn backoff_schedule(&self) -> Vec<Duration> {
        (0..self.max_retries)
            .map(|i| Duration::from_millis(self.backoff_ms << i))
            .collect()
    }
}

struct Limiter {
    max: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().expect("limiter lock");
        while *n >= self.max {
            n = self.freed.wait(n).expect("limiter lock");
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().expect("limiter lock") -= 1;
        self.0.freed.notify_one();
    }
}

/// HTTP client for a remote scoring API following the `/query` wire contract.
pub struct RemoteOracle {
    cfg: RemoteConfig,
    endpoint: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    limiter: Arc<Limiter>,
}

enum Attempt {
    Done(Scores),
    Retry(String),
    Fail(Error),
}

impl RemoteOracle {
    pub fn new(cfg: RemoteConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        let endpoint = format!("{}/query", cfg.url.trim_end_matches('/'));
        let limiter = Arc::new(Limiter {
            max: cfg.max_in_flight.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        });
        Ok(Self {
            api_key: std::env::var(API_KEY_ENV).ok(),
            cfg,
            endpoint,
            client,
            limiter,
        })
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    fn attempt(&self, body: &str) -> Attempt {
        let mut req = self
            .client
            .post(&self.endpoint)
            .header("Content-Type", "application/json")
            .body(body.to_string());
        if let Some(key) = &self.api_key {
            req = req.header(API_KEY_HEADER, key);
        }
        let resp = match req.send() {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = resp.status();
        let text = match resp.text() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        if status.is_server_error() {
            return Attempt::Retry(format!("HTTP {status}: {text}"));
        }
        let value: Value = match serde_json::from_str(&text) {
            Ok(v) => v,
            Err(e) if status.is_success() => return Attempt::Retry(format!("unparseable response: {e}")),
            Err(_) => Value::Null,
        };
        match status.as_u16() {
            200..=299 => match self.parse_scores(&value) {
                Ok(s) => Attempt::Done(s),
                Err(e) => Attempt::Fail(e),
            },
            429 => Attempt::Fail(Error::BudgetExhausted {
                used: value.get("queries_used").and_then(Value::as_u64).unwrap_or(0) as usize,
                budget: value.get("budget").and_then(Value::as_u64).unwrap_or(0) as usize,
            }),
            code => Attempt::Fail(Error::InvalidParameter(format!(
                "remote oracle rejected the query (HTTP {code}): {}",
                value.get("error").and_then(Value::as_str).unwrap_or(&text)
            ))),
        }
    }

    fn parse_scores(&self, v: &Value) -> Result<Scores> {
        let field = |key: &str| {
            v.get(key)
                .and_then(Value::as_f64)
                .ok_or_else(|| Error::Transport(format!("response lacks numeric field `{key}`")))
        };
        let probabilities = match v.get(&self.cfg.fields.probabilities) {
            None | Some(Value::Null) => None,
            Some(Value::Array(items)) => Some(
                items
                    .iter()
                    .map(|x| {
                        x.as_f64()
                            .ok_or_else(|| Error::Transport("non-numeric probability".into()))
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
            Some(_) => return Err(Error::Transport("probabilities must be an array".into())),
        };
        Ok(Scores {
            confidence: field(&self.cfg.fields.confidence)?,
            stealthiness: field(&self.cfg.fields.stealthiness)?,
            probabilities,
        })
    }
}

impl Oracle for RemoteOracle {
    fn score(&self, img: &RasterImage, source: usize, target: usize) -> Result<Scores> {
        let png = img.encode_png()?;
        let body = serde_json::to_string(&QueryRequest {
            image_png_b64: base64::engine::general_purpose::STANDARD.encode(png),
            source_id: source as i64,
            target_id: target as i64,
        })?;
        let _permit = self.limiter.acquire();
        let schedule = self.cfg.backoff_schedule();
        let mut last = String::new();
        for attempt in 0..=schedule.len() {
            if attempt > 0 {
                log::warn!("query to {} failed ({last}); retry {attempt}", self.endpoint);
                std::thread::sleep(schedule[attempt - 1]);
            }
            match self.attempt(&body) {
                Attempt::Done(s) => return Ok(s),
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(msg) => last = msg,
            }
        }
        Err(Error::Transport(format!(
            "{} unreachable after {} retries: {last}",
            self.endpoint,
            schedule.len()
        )))
    }

    fn num_classes(&self) -> usize {
        NUM_CLASSES
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_backoff_doubles_from_half_a_second() {
        let cfg = RemoteConfig::new("http://localhost:1");
        let s = cfg.backoff_schedule();
        assert_eq!(
            s,
            vec![Duration::from_millis(500), Duration::from_millis(1000), Duration::from_millis(2000)]
        );
    }

    #[test]
    fn field_mapping_is_configurable() {
        let mut cfg = RemoteConfig::new("http://localhost:1");
        cfg.fields.confidence = "conf".into();
        cfg.fields.stealthiness = "sim".into();
        let oracle = RemoteOracle::new(cfg).unwrap();
        let v: Value = serde_json::json!({"conf": 0.25, "sim": 0.75});
        let s = oracle.parse_scores(&v).unwrap();
        assert_eq!((s.confidence, s.stealthiness, s.probabilities), (0.25, 0.75, None));
        assert!(oracle.parse_scores(&serde_json::json!({"confidence": 0.1})).is_err());
    }

    #[test]
    fn unreachable_endpoint_is_a_transport_error() {
        // Port 1 on loopback refuses connections immediately.
        let mut cfg = RemoteConfig::new("http://127.0.0.1:1");
        cfg.backoff_ms = 1;
        let oracle = RemoteOracle::new(cfg).unwrap();
        let img = RasterImage::filled(4, 4, 3, 0.5);
        assert!(matches!(oracle.score(&img, 0, 1), Err(Error::Transport(_))));
    }
}
