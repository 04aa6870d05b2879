//! Provider-neutral generation client: chat-call envelope, retry policy,
//! response cache, per-call accounting, and providers (live HTTP plus a
//! deterministic scripted mock).

mod cache;
mod http;
mod mock;

pub use cache::ResponseCache;
pub use http::HttpProvider;
pub use mock::{MockMatcher, MockProvider, MockRule, MockScript};

use serde::{Deserialize, Serialize};
use std::sync::{Arc, Mutex};
use std::time::Duration;
use thiserror::Error;

pub const DEFAULT_TEMPERATURE: f64 = 0.5;
pub const DEFAULT_TOP_P: f64 = 0.95;
pub const DEFAULT_MAX_TOKENS: u32 = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

/// Provider-neutral chat-call envelope.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<Vec<String>>,
    /// Cache and scripting key component; lets otherwise identical prompts
    /// produce independent samples.
    pub seed_label: String,
}

impl GenerationRequest {
    /// Single user-message request with the default sampling parameters.
    pub fn user(prompt: impl Into<String>) -> Self {
        GenerationRequest {
            messages: vec![Message { role: Role::User, content: prompt.into() }],
            temperature: DEFAULT_TEMPERATURE,
            top_p: DEFAULT_TOP_P,
            max_tokens: DEFAULT_MAX_TOKENS,
            stop: None,
            seed_label: String::new(),
        }
    }

    pub fn temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn max_tokens(mut self, n: u32) -> Self {
        self.max_tokens = n;
        self
    }

    pub fn seed_label(mut self, label: impl Into<String>) -> Self {
        self.seed_label = label.into();
        self
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if !self.messages.iter().any(|m| matches!(m.role, Role::User)) {
            return Err(LlmError::InvalidRequest("at least one user message required".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(LlmError::InvalidRequest(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        Ok(())
    }

    /// All message contents joined in order, used for mock matching and
    /// token estimation.
    pub fn prompt_text(&self) -> String {
        self.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub provider_id: String,
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("rate limited")]
    RateLimited,
    #[error("retries exhausted after {attempts} attempts: {source}")]
    ExhaustedRetries { attempts: u32, source: Box<LlmError> },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl LlmError {
    fn is_retryable(&self) -> bool {
        matches!(self, LlmError::Transport(_) | LlmError::RateLimited)
    }
}

/// A chat-completion backend. Implementations must be deterministic for the
/// mock path and safe for concurrent use.
pub trait Provider: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, LlmError>;
    fn id(&self) -> &str;
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 3, base_delay: Duration::from_millis(250) }
    }
}

impl RetryPolicy {
    /// Zero-delay policy for tests.
    pub fn immediate(max_attempts: u32) -> Self {
        RetryPolicy { max_attempts, base_delay: Duration::ZERO }
    }
}

/// Retries transport failures and rate limits with exponential backoff
/// (`base_delay * 2^attempt`); other errors propagate immediately.
pub fn generate_with_retry(
    provider: &dyn Provider,
    request: &GenerationRequest,
    policy: RetryPolicy,
) -> Result<GenerationResponse, LlmError> {
    assert!(policy.max_attempts >= 1, "max_attempts must be >= 1");
    let mut last_err = None;
    for attempt in 0..policy.max_attempts {
        match provider.generate(request) {
            Ok(resp) => return Ok(resp),
            Err(e) if e.is_retryable() => {
                log::warn!("attempt {} failed: {e}", attempt + 1);
                last_err = Some(e);
                if attempt + 1 < policy.max_attempts && !policy.base_delay.is_zero() {
                    std::thread::sleep(policy.base_delay * 2u32.pow(attempt));
                }
            }
            Err(e) => return Err(e),
        }
    }
    Err(LlmError::ExhaustedRetries {
        attempts: policy.max_attempts,
        source: Box::new(last_err.expect("at least one attempt ran")),
    })
}

/// One accounted generation call.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CallRecord {
    pub provider_id: String,
    pub seed_label: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub cached: bool,
}

/// Append-only accounting log shared across workers.
#[derive(Debug, Clone, Default)]
pub struct CallLog {
    records: Arc<Mutex<Vec<CallRecord>>>,
}

impl CallLog {
    pub fn new() -> Self {
        Self::default()
    }

    fn record(&self, record: CallRecord) {
        self.records.lock().expect("call log poisoned").push(record);
    }

    pub fn snapshot(&self) -> Vec<CallRecord> {
        self.records.lock().expect("call log poisoned").clone()
    }

    /// Calls that actually reached the provider (cache misses).
    pub fn provider_calls(&self) -> usize {
        self.records.lock().expect("call log poisoned").iter().filter(|r| !r.cached).count()
    }

    pub fn total_tokens(&self) -> (u64, u64) {
        let records = self.records.lock().expect("call log poisoned");
        records.iter().fold((0, 0), |(p, c), r| (p + r.prompt_tokens, c + r.completion_tokens))
    }
}

/// Generation client combining a provider with retry, optional caching, and
/// accounting. Safe for concurrent use by many workers.
pub struct LlmClient {
    provider: Arc<dyn Provider>,
    policy: RetryPolicy,
    cache: Option<ResponseCache>,
    log: CallLog,
}

impl LlmClient {
    pub fn new(provider: Arc<dyn Provider>, policy: RetryPolicy) -> Self {
        LlmClient { provider, policy, cache: None, log: CallLog::new() }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn log(&self) -> &CallLog {
        &self.log
    }

    pub fn provider_id(&self) -> &str {
        self.provider.id()
    }

    /// Cache hit returns the stored response without a provider call; a miss
    /// delegates to the retrying path and stores the result. Cache I/O
    /// failures degrade to uncached calls.
    pub fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, LlmError> {
        request.validate()?;
        let cached = match &self.cache {
            Some(cache) => {
                let key = cache.key(request, self.provider.id());
                match cache.load(&key) {
                    Some(resp) => {
                        self.account(request, &resp, true);
                        return Ok(resp);
                    }
                    None => Some((cache, key)),
                }
            }
            None => None,
        };
        let resp = generate_with_retry(self.provider.as_ref(), request, self.policy)?;
        if let Some((cache, key)) = cached {
            cache.store(&key, request, &resp);
        }
        self.account(request, &resp, false);
        Ok(resp)
    }

    fn account(&self, request: &GenerationRequest, resp: &GenerationResponse, cached: bool) {
        self.log.record(CallRecord {
            provider_id: resp.provider_id.clone(),
            seed_label: request.seed_label.clone(),
            prompt_tokens: resp.prompt_tokens,
            completion_tokens: resp.completion_tokens,
            cached,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    struct FlakyProvider {
        failures: AtomicU32,
        error: fn() -> LlmError,
        calls: AtomicU32,
    }

    impl Provider for FlakyProvider {
        fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, LlmError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if self.failures.load(Ordering::SeqCst) > 0 {
                self.failures.fetch_sub(1, Ordering::SeqCst);
                return Err((self.error)());
            }
            Ok(GenerationResponse {
                text: "ok".into(),
                prompt_tokens: crate::model::estimate_tokens(&req.prompt_text(), None),
                completion_tokens: 1,
                provider_id: "flaky".into(),
            })
        }
        fn id(&self) -> &str {
            "flaky"
        }
    }

    #[test]
    fn retry_recovers_from_transient_failures() {
        let p = FlakyProvider {
            failures: AtomicU32::new(2),
            error: || LlmError::Transport("boom".into()),
            calls: AtomicU32::new(0),
        };
        let req = GenerationRequest::user("hi");
        let resp = generate_with_retry(&p, &req, RetryPolicy::immediate(3)).unwrap();
        assert_eq!(resp.text, "ok");
        assert_eq!(p.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn protocol_errors_do_not_retry() {
        let p = FlakyProvider {
            failures: AtomicU32::new(5),
            error: || LlmError::Protocol("bad body".into()),
            calls: AtomicU32::new(0),
        };
        let req = GenerationRequest::user("hi");
        let err = generate_with_retry(&p, &req, RetryPolicy::immediate(3)).unwrap_err();
        assert!(matches!(err, LlmError::Protocol(_)));
        assert_eq!(p.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn rate_limit_exhausts_after_max_attempts() {
        let p = FlakyProvider {
            failures: AtomicU32::new(10),
            error: || LlmError::RateLimited,
            calls: AtomicU32::new(0),
        };
        let req = GenerationRequest::user("hi");
        let err = generate_with_retry(&p, &req, RetryPolicy::immediate(2)).unwrap_err();
        match err {
            LlmError::ExhaustedRetries { attempts, source } => {
                assert_eq!(attempts, 2);
                assert!(matches!(*source, LlmError::RateLimited));
            }
            other => panic!("unexpected error {other:?}"),
        }
        assert_eq!(p.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn request_validation() {
        assert!(GenerationRequest::user("x").validate().is_ok());
        assert!(GenerationRequest::user("x").temperature(3.0).validate().is_err());
        let mut no_user = GenerationRequest::user("x");
        no_user.messages[0].role = Role::System;
        assert!(no_user.validate().is_err());
    }

    #[test]
    fn defaults_match_decoding_configuration() {
        let req = GenerationRequest::user("x");
        assert_eq!(req.temperature, 0.5);
        assert_eq!(req.top_p, 0.95);
    }
}
