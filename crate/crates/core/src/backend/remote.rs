use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, OnceLock};
use std::thread;
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use super::{BackendError, MaskedVariant, MlmBackend, TopKPrediction};
use crate::tokenizer::Vocabulary;

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub base_url: String,
    /// Total attempts per request, first try included.
    pub max_attempts: u32,
    /// Delay before the second attempt; doubles for each further attempt.
    pub base_delay: Duration,
    pub max_in_flight: usize,
    pub timeout: Duration,
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            max_attempts: 3,
            base_delay: Duration::from_secs(1),
            max_in_flight: 8,
            timeout: Duration::from_secs(60),
        }
    }

    fn delay_before(&self, attempt: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(attempt.saturating_sub(2))
    }
}

#[derive(Serialize)]
struct TopKRequest<'a> {
    tokens: &'a [String],
    masked_index: usize,
    k: usize,
}

#[derive(Deserialize)]
struct TopKResponse {
    model: String,
    tokens: Vec<String>,
}

#[derive(Deserialize)]
struct HealthResponse {
    model: String,
}

/// Counting semaphore bounding concurrent requests.
struct Permits {
    available: Mutex<usize>,
    freed: Condvar,
}

impl Permits {
    fn acquire(&self) -> PermitGuard<'_> {
        let mut n = self.available.lock().unwrap();
        while *n == 0 {
            n = self.freed.wait(n).unwrap();
        }
        *n -= 1;
        PermitGuard(self)
    }
}

struct PermitGuard<'a>(&'a Permits);

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().unwrap() += 1;
        self.0.freed.notify_one();
    }
}

enum Failure {
    Transient(String),
    Fatal(u16, String),
}

/// Client for an HTTP service speaking the `/topk` + `/health` protocol.
pub struct RemoteBackend {
    client: Client,
    config: RemoteConfig,
    vocab: Arc<Vocabulary>,
    model: OnceLock<String>,
    permits: Permits,
    requests: AtomicU64,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig, vocab: Arc<Vocabulary>) -> Result<Self, BackendError> {
        let client = Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::Health(e.to_string()))?;
        let permits = Permits {
            available: Mutex::new(config.max_in_flight.max(1)),
            freed: Condvar::new(),
        };
        Ok(Self {
            client,
            config,
            vocab,
            model: OnceLock::new(),
            permits,
            requests: AtomicU64::new(0),
        })
    }

    /// HTTP requests issued so far, retries included.
    pub fn request_count(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    fn with_retries<T>(
        &self,
        what: &str,
        mut attempt_once: impl FnMut() -> Result<T, Failure>,
    ) -> Result<T, Failure> {
        let mut last = None;
        for attempt in 1..=self.config.max_attempts.max(1) {
            if attempt > 1 {
                let delay = self.config.delay_before(attempt);
                debug!(what, attempt, ?delay, "retrying");
                thread::sleep(delay);
            }
            let _permit = self.permits.acquire();
            self.requests.fetch_add(1, Ordering::Relaxed);
            match attempt_once() {
                Ok(v) => return Ok(v),
                Err(Failure::Transient(msg)) => {
                    warn!(what, attempt, error = %msg, "request failed");
                    last = Some(msg);
                }
                Err(fatal) => return Err(fatal),
            }
        }
        Err(Failure::Transient(last.unwrap_or_default()))
    }

    fn classify(status: StatusCode, body: String) -> Failure {
        if status.is_server_error()
            || status == StatusCode::TOO_MANY_REQUESTS
            || status == StatusCode::REQUEST_TIMEOUT
        {
            Failure::Transient(format!("status {status}: {body}"))
        } else {
            Failure::Fatal(status.as_u16(), body)
        }
    }
}

impl MlmBackend for RemoteBackend {
    fn kind(&self) -> &str {
        "remote"
    }

    fn model_id(&self) -> Result<String, BackendError> {
        if let Some(m) = self.model.get() {
            return Ok(m.clone());
        }
        let url = format!("{}/health", self.config.base_url);
        let health = self
            .with_retries("health", || {
                let resp = self
                    .client
                    .get(&url)
                    .send()
                    .map_err(|e| Failure::Transient(e.to_string()))?;
                let status = resp.status();
                if !status.is_success() {
                    return Err(Self::classify(status, resp.text().unwrap_or_default()));
                }
                resp.json::<HealthResponse>()
                    .map_err(|e| Failure::Fatal(status.as_u16(), format!("bad health body: {e}")))
            })
            .map_err(|f| match f {
                Failure::Transient(m) => BackendError::Health(m),
                Failure::Fatal(s, m) => BackendError::Health(format!("status {s}: {m}")),
            })?;
        Ok(self.model.get_or_init(|| health.model).clone())
    }

    fn predict_topk(
        &self,
        example_id: &str,
        variant: &MaskedVariant,
        k: usize,
    ) -> Result<TopKPrediction, BackendError> {
        if k == 0 {
            return Err(BackendError::InvalidK);
        }
        let model = self.model_id()?;
        let masked_index = variant.masked_index();
        let tokens = variant.rendered_tokens();
        let body = TopKRequest {
            tokens: &tokens,
            masked_index,
            k,
        };
        let url = format!("{}/topk", self.config.base_url);
        let invalid = |message: String| BackendError::InvalidResponse {
            example_id: example_id.to_string(),
            masked_index,
            message,
        };

        let response = self
            .with_retries("topk", || {
                let resp = self
                    .client
                    .post(&url)
                    .json(&body)
                    .send()
                    .map_err(|e| Failure::Transient(e.to_string()))?;
                let status = resp.status();
                if !status.is_success() {
                    return Err(Self::classify(status, resp.text().unwrap_or_default()));
                }
                resp.json::<TopKResponse>()
                    .map_err(|e| Failure::Fatal(status.as_u16(), format!("bad response body: {e}")))
            })
            .map_err(|f| match f {
                Failure::Transient(message) => BackendError::Unreachable {
                    example_id: example_id.to_string(),
                    masked_index,
                    message,
                },
                Failure::Fatal(status, message) if (200..300).contains(&status) => invalid(message),
                Failure::Fatal(status, message) => BackendError::Rejected {
                    example_id: example_id.to_string(),
                    masked_index,
                    status,
                    message,
                },
            })?;

        if response.model != model {
            return Err(invalid(format!(
                "model changed from {model:?} to {:?}",
                response.model
            )));
        }
        TopKPrediction::new_in(response.tokens, k, &self.vocab).map_err(invalid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles_from_base() {
        let mut cfg = RemoteConfig::new("http://x/");
        assert_eq!(cfg.base_url, "http://x");
        cfg.base_delay = Duration::from_millis(10);
        assert_eq!(cfg.delay_before(2), Duration::from_millis(10));
        assert_eq!(cfg.delay_before(3), Duration::from_millis(20));
        assert_eq!(cfg.delay_before(4), Duration::from_millis(40));
    }
}
