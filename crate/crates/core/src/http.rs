//! Minimal JSON-over-HTTP plumbing shared by the chat and embedding clients.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde_json::Value;
use thiserror::Error;

/// Environment variable holding the bearer token for remote endpoints.
pub const API_KEY_ENV: &str = "MAAS_API_KEY";
/// Environment variable holding the base URL of the OpenAI-compatible server.
pub const BASE_URL_ENV: &str = "MAAS_BASE_URL";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("network error: {0}")]
    Network(String),
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("response is not JSON: {0}")]
    Decode(String),
}

impl TransportError {
    /// Connection failures, 429 and 5xx are worth another attempt.
    pub fn is_transient(&self) -> bool {
        match self {
            TransportError::Network(_) => true,
            TransportError::Status { status, .. } => *status == 429 || *status >= 500,
            TransportError::Decode(_) => false,
        }
    }
}

/// Posts a JSON body and returns the decoded JSON reply.
pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &Value)
        -> Result<Value, TransportError>;
}

/// Blocking reqwest-backed transport.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Result<Self, TransportError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| TransportError::Network(e.to_string()))?;
        Ok(Self { client })
    }
}

impl Transport for HttpTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &Value,
    ) -> Result<Value, TransportError> {
        let mut req = self.client.post(url).json(body);
        if let Some(token) = bearer {
            req = req.bearer_auth(token);
        }
        let resp = req
            .send()
            .map_err(|e| TransportError::Network(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| TransportError::Network(e.to_string()))?;
        if !status.is_success() {
            return Err(TransportError::Status {
                status: status.as_u16(),
                body: text,
            });
        }
        serde_json::from_str(&text).map_err(|e| TransportError::Decode(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (1-based): base, 2·base, 4·base, ...
    pub fn delay(&self, attempt: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(attempt.saturating_sub(1))
    }

    /// Runs `call` until it succeeds, fails permanently, or attempts run out.
    /// Returns the final error together with the number of attempts made.
    pub fn run<T>(
        &self,
        mut call: impl FnMut() -> Result<T, TransportError>,
    ) -> Result<T, (TransportError, u32)> {
        let mut attempt = 1;
        loop {
            match call() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_transient() && attempt < self.max_attempts => {
                    log::warn!("request failed (attempt {attempt}): {e}; retrying");
                    std::thread::sleep(self.delay(attempt));
                    attempt += 1;
                }
                Err(e) => return Err((e, attempt)),
            }
        }
    }
}

/// Counting gate bounding the number of in-flight requests.
pub struct InFlightLimit {
    cap: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

impl InFlightLimit {
    pub fn new(cap: usize) -> Self {
        Self {
            cap: cap.max(1),
            used: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> InFlightGuard<'_> {
        let mut used = self.used.lock().unwrap_or_else(|e| e.into_inner());
        while *used >= self.cap {
            used = self.freed.wait(used).unwrap_or_else(|e| e.into_inner());
        }
        *used += 1;
        InFlightGuard { limit: self }
    }
}

pub struct InFlightGuard<'a> {
    limit: &'a InFlightLimit,
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut used = self.limit.used.lock().unwrap_or_else(|e| e.into_inner());
        *used -= 1;
        self.limit.freed.notify_one();
    }
}

/// Joins a base URL and an API path without doubling slashes.
pub fn endpoint(base_url: &str, path: &str) -> String {
    format!("{}/{}", base_url.trim_end_matches('/'), path.trim_start_matches('/'))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles() {
        let p = RetryPolicy::default();
        assert_eq!(p.delay(1), Duration::from_secs(1));
        assert_eq!(p.delay(2), Duration::from_secs(2));
        assert_eq!(p.delay(3), Duration::from_secs(4));
    }

    #[test]
    fn permanent_errors_are_not_retried() {
        let p = RetryPolicy { max_attempts: 3, base_delay: Duration::ZERO };
        let mut calls = 0;
        let res: Result<(), _> = p.run(|| {
            calls += 1;
            Err(TransportError::Status { status: 401, body: String::new() })
        });
        assert_eq!(res.unwrap_err().1, 1);
        assert_eq!(calls, 1);
    }

    #[test]
    fn endpoint_join() {
        assert_eq!(endpoint("http://x/", "/v1/embeddings"), "http://x/v1/embeddings");
        assert_eq!(endpoint("http://x", "v1/chat/completions"), "http://x/v1/chat/completions");
    }

    #[test]
    fn in_flight_limit_blocks_until_release() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let limit = InFlightLimit::new(2);
        let peak = AtomicUsize::new(0);
        let live = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    let _g = limit.acquire();
                    let now = live.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(5));
                    live.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
