//! Text-completion backends.
//!
//! [`HttpBackend`] talks to any OpenAI-compatible `chat/completions`
//! endpoint; [`MockBackend`] is a deterministic stand-in keyed off the task
//! tags embedded in every prompt. Callers go through [`complete`] and
//! [`sample_n`], which validate requests and enforce the output contract.

mod http;
mod mock;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use http::HttpBackend;
pub use mock::{solution_code, test_harness, MockBackend, MockConfig, PassPattern, ScoreProfile};

/// Environment variable holding the bearer token for the HTTP backend.
pub const API_KEY_ENV: &str = "XFORGE_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_new_tokens: u32,
    pub temperature: f64,
    pub sample_seed: u64,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>, max_new_tokens: u32, temperature: f64, sample_seed: u64) -> Self {
        Self {
            prompt: prompt.into(),
            max_new_tokens,
            temperature,
            sample_seed,
        }
    }

    pub fn is_greedy(&self) -> bool {
        self.temperature == 0.0
    }

    pub fn with_seed(&self, sample_seed: u64) -> Self {
        Self {
            sample_seed,
            ..self.clone()
        }
    }

    fn validate(&self) -> Result<(), GatewayError> {
        if self.max_new_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_new_tokens must be positive".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature must be a non-negative number, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint_url: Option<String>,
    pub model_name: Option<String>,
    pub request_timeout_s: u64,
    pub max_retries: u32,
    /// Upper bound on concurrent HTTP requests.
    pub max_in_flight: usize,
    /// Base delay between retries; doubles per attempt.
    pub retry_backoff_ms: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoint_url: None,
            model_name: None,
            request_timeout_s: 120,
            max_retries: 3,
            max_in_flight: 8,
            retry_backoff_ms: 500,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.request_timeout_s == 0 {
            return Err(GatewayError::InvalidConfig("request_timeout_s must be positive".into()));
        }
        if self.kind == BackendKind::Http {
            if self.endpoint_url.as_deref().is_none_or(str::is_empty) {
                return Err(GatewayError::InvalidConfig("http backend needs endpoint_url".into()));
            }
            if self.model_name.as_deref().is_none_or(str::is_empty) {
                return Err(GatewayError::InvalidConfig("http backend needs model_name".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GatewayError {
    #[error("backend unavailable after {attempts} attempt(s): {reason}")]
    BackendUnavailable { attempts: u32, reason: String },
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("backend timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("invalid completion request: {0}")]
    InvalidRequest(String),
    #[error("invalid backend config: {0}")]
    InvalidConfig(String),
}

pub trait Backend: Send + Sync {
    /// Raw completion; prefer the validating [`complete`] wrapper.
    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError>;
}

/// One completion. Rejects invalid requests and empty outputs.
pub fn complete(backend: &dyn Backend, request: &CompletionRequest) -> Result<String, GatewayError> {
    request.validate()?;
    let text = backend.complete(request)?;
    if text.trim().is_empty() {
        return Err(GatewayError::MalformedResponse("empty completion".into()));
    }
    Ok(text)
}

/// `n` completions with seeds `sample_seed, sample_seed + 1, …` in seed order.
/// Any failure fails the whole batch.
pub fn sample_n(
    backend: &dyn Backend,
    request: &CompletionRequest,
    n: usize,
) -> Result<Vec<String>, GatewayError> {
    if n == 0 {
        return Err(GatewayError::InvalidRequest("n must be at least 1".into()));
    }
    if n > 1 && request.temperature <= 0.0 {
        return Err(GatewayError::InvalidRequest(
            "sampling more than one completion needs temperature > 0".into(),
        ));
    }
    (0..n as u64)
        .map(|i| complete(backend, &request.with_seed(request.sample_seed.wrapping_add(i))))
        .collect()
}

/// Builds the backend described by `config`.
pub fn connect(config: &BackendConfig, mock: MockConfig) -> Result<Arc<dyn Backend>, GatewayError> {
    config.validate()?;
    Ok(match config.kind {
        BackendKind::Mock => Arc::new(MockBackend::new(mock)),
        BackendKind::Http => Arc::new(HttpBackend::new(config, std::env::var(API_KEY_ENV).ok())?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mock() -> MockBackend {
        MockBackend::new(MockConfig::default())
    }

    #[test]
    fn http_config_needs_endpoint_and_model() {
        let mut cfg = BackendConfig {
            kind: BackendKind::Http,
            ..BackendConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.endpoint_url = Some("http://localhost:1".into());
        assert!(cfg.validate().is_err());
        cfg.model_name = Some("m".into());
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn sample_n_follows_seed_order() {
        let backend = mock();
        let req = CompletionRequest::new("[TASK:RESPOND_TO_INSTRUCT]\n[LANG:python]\n### Instruction\nWrite solve", 256, 0.8, 7);
        let batch = sample_n(&backend, &req, 3).unwrap();
        let singles: Vec<String> = (7..10)
            .map(|s| complete(&backend, &req.with_seed(s)).unwrap())
            .collect();
        assert_eq!(batch, singles);
    }

    #[test]
    fn sample_n_greedy_singleton_matches_complete() {
        let backend = mock();
        let req = CompletionRequest::new("[TASK:SCORE]\n[LANG:java]\n", 64, 0.0, 3);
        assert_eq!(sample_n(&backend, &req, 1).unwrap(), vec![complete(&backend, &req).unwrap()]);
    }

    #[test]
    fn sample_n_rejects_bad_arguments() {
        let backend = mock();
        let req = CompletionRequest::new("[TASK:SCORE]", 64, 0.0, 3);
        assert!(matches!(sample_n(&backend, &req, 0), Err(GatewayError::InvalidRequest(_))));
        assert!(matches!(sample_n(&backend, &req, 2), Err(GatewayError::InvalidRequest(_))));
        let zero_tokens = CompletionRequest::new("[TASK:SCORE]", 0, 0.5, 3);
        assert!(complete(&backend, &zero_tokens).is_err());
    }

    #[test]
    fn sample_n_lengths_match_n() {
        let backend = mock();
        let req = CompletionRequest::new("[TASK:REFLECT]\n[LANG:cpp]\n", 64, 1.0, 0);
        for n in 1..=256 {
            assert_eq!(sample_n(&backend, &req, n).unwrap().len(), n);
        }
    }

    #[test]
    fn sample_n_supports_large_batches() {
        let backend = mock();
        let req = CompletionRequest::new("[TASK:RESPOND_TO_INSTRUCT]\n[LANG:bash]\n", 64, 0.8, u64::MAX - 5);
        assert_eq!(sample_n(&backend, &req, 128).unwrap().len(), 128);
    }

    struct Failing;
    impl Backend for Failing {
        fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
            if request.sample_seed == 5 {
                Err(GatewayError::Timeout { attempts: 1 })
            } else {
                Ok("x".into())
            }
        }
    }

    #[test]
    fn partial_batches_are_errors() {
        let req = CompletionRequest::new("p", 8, 1.0, 0);
        assert_eq!(sample_n(&Failing, &req, 10), Err(GatewayError::Timeout { attempts: 1 }));
        assert_eq!(sample_n(&Failing, &req, 5).unwrap().len(), 5);
    }
}
