//! Blocking client for OpenAI-compatible `POST {endpoint}/chat/completions`.

use std::time::Duration;

use log::{debug, warn};
use serde_json::{json, Value};

use super::{Backend, BackendConfig, CompletionRequest, GatewayError};
use crate::util::Semaphore;

pub struct HttpBackend {
    agent: ureq::Agent,
    url: String,
    model: String,
    api_key: Option<String>,
    max_retries: u32,
    backoff: Duration,
    in_flight: Semaphore,
}

enum Attempt {
    Done(String),
    Retry { timed_out: bool, reason: String },
    Fatal(GatewayError),
}

impl HttpBackend {
    pub fn new(config: &BackendConfig, api_key: Option<String>) -> Result<Self, GatewayError> {
        config.validate()?;
        let endpoint = config.endpoint_url.clone().unwrap_or_default();
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.request_timeout_s)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            agent,
            url: format!("{}/chat/completions", endpoint.trim_end_matches('/')),
            model: config.model_name.clone().unwrap_or_default(),
            api_key,
            max_retries: config.max_retries,
            backoff: Duration::from_millis(config.retry_backoff_ms),
            in_flight: Semaphore::new(config.max_in_flight),
        })
    }

    fn body(&self, request: &CompletionRequest) -> Value {
        json!({
            "model": self.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "max_tokens": request.max_new_tokens,
            "temperature": request.temperature,
            "seed": request.sample_seed,
            "stream": false,
        })
    }

    fn attempt(&self, body: &Value) -> Attempt {
        let _permit = self.in_flight.acquire();
        let mut call = self.agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = match call.send_json(body) {
            Ok(r) => r,
            Err(ureq::Error::Timeout(t)) => {
                return Attempt::Retry {
                    timed_out: true,
                    reason: format!("timeout: {t}"),
                }
            }
            Err(e) => {
                return Attempt::Retry {
                    timed_out: false,
                    reason: e.to_string(),
                }
            }
        };
        let status = response.status().as_u16();
        if status == 429 || (500..600).contains(&status) {
            return Attempt::Retry {
                timed_out: false,
                reason: format!("HTTP {status}"),
            };
        }
        if !(200..300).contains(&status) {
            let detail = response.body_mut().read_to_string().unwrap_or_default();
            return Attempt::Fatal(GatewayError::BackendUnavailable {
                attempts: 1,
                reason: format!("HTTP {status}: {}", detail.chars().take(200).collect::<String>()),
            });
        }
        let payload: Value = match response.body_mut().read_json() {
            Ok(v) => v,
            Err(ureq::Error::Timeout(t)) => {
                return Attempt::Retry {
                    timed_out: true,
                    reason: format!("timeout: {t}"),
                }
            }
            Err(e) => return Attempt::Fatal(GatewayError::MalformedResponse(e.to_string())),
        };
        match payload.pointer("/choices/0/message/content").and_then(Value::as_str) {
            Some(text) if !text.trim().is_empty() => Attempt::Done(text.to_string()),
            Some(_) => Attempt::Fatal(GatewayError::MalformedResponse("empty message content".into())),
            None => Attempt::Fatal(GatewayError::MalformedResponse(
                "missing choices[0].message.content".into(),
            )),
        }
    }
}

impl Backend for HttpBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        let body = self.body(request);
        let mut last_timed_out = false;
        let mut last_reason = String::new();
        let attempts = self.max_retries + 1;
        for attempt in 0..attempts {
            if attempt > 0 && !self.backoff.is_zero() {
                std::thread::sleep(self.backoff * 2u32.saturating_pow(attempt - 1).min(64));
            }
            match self.attempt(&body) {
                Attempt::Done(text) => return Ok(text),
                Attempt::Fatal(GatewayError::BackendUnavailable { reason, .. }) => {
                    return Err(GatewayError::BackendUnavailable {
                        attempts: attempt + 1,
                        reason,
                    })
                }
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry { timed_out, reason } => {
                    debug!("attempt {} to {} failed: {reason}", attempt + 1, self.url);
                    last_timed_out = timed_out;
                    last_reason = reason;
                }
            }
        }
        warn!("giving up on {} after {attempts} attempt(s): {last_reason}", self.url);
        if last_timed_out {
            Err(GatewayError::Timeout { attempts })
        } else {
            Err(GatewayError::BackendUnavailable {
                attempts,
                reason: last_reason,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::BackendKind;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::{Arc, Mutex};

    /// Serves one scripted `(status, body)` per connection and records the
    /// request bodies it saw.
    fn serve(script: Vec<(u16, String)>) -> (String, Arc<AtomicUsize>, Arc<Mutex<Vec<String>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let seen = Arc::new(Mutex::new(Vec::new()));
        let (hits2, seen2) = (hits.clone(), seen.clone());
        std::thread::spawn(move || {
            for (status, body) in script {
                let Ok((mut stream, _)) = listener.accept() else { return };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                let mut auth = String::new();
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if lower.starts_with("authorization:") {
                        auth = line.trim().to_string();
                    }
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                }
                let mut buf = vec![0u8; len];
                reader.read_exact(&mut buf).unwrap();
                seen2.lock().unwrap().push(format!("{auth}\n{}", String::from_utf8_lossy(&buf)));
                hits2.fetch_add(1, Ordering::SeqCst);
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
        });
        (format!("http://{addr}/v1"), hits, seen)
    }

    fn config(url: &str, max_retries: u32) -> BackendConfig {
        BackendConfig {
            kind: BackendKind::Http,
            endpoint_url: Some(url.to_string()),
            model_name: Some("test-model".into()),
            request_timeout_s: 5,
            max_retries,
            max_in_flight: 2,
            retry_backoff_ms: 0,
        }
    }

    fn ok_body(text: &str) -> String {
        json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
    }

    #[test]
    fn parses_chat_completion_and_sends_key() {
        let (url, hits, seen) = serve(vec![(200, ok_body("hello"))]);
        let backend = HttpBackend::new(&config(&url, 0), Some("sk-test".into())).unwrap();
        let out = backend.complete(&CompletionRequest::new("p", 16, 0.0, 1)).unwrap();
        assert_eq!(out, "hello");
        assert_eq!(hits.load(Ordering::SeqCst), 1);
        let seen = seen.lock().unwrap();
        assert!(seen[0].contains("Bearer sk-test"));
        assert!(seen[0].contains("test-model"), "{}", seen[0]);
    }

    #[test]
    fn retries_on_429_and_5xx_then_succeeds() {
        let (url, hits, _) = serve(vec![
            (429, "{}".into()),
            (503, "{}".into()),
            (200, ok_body("done")),
        ]);
        let backend = HttpBackend::new(&config(&url, 2), None).unwrap();
        assert_eq!(backend.complete(&CompletionRequest::new("p", 16, 0.5, 1)).unwrap(), "done");
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn retries_never_exceed_max() {
        let (url, hits, _) = serve(vec![(500, "{}".into()); 5]);
        let backend = HttpBackend::new(&config(&url, 2), None).unwrap();
        let err = backend.complete(&CompletionRequest::new("p", 16, 0.5, 1)).unwrap_err();
        assert_eq!(
            err,
            GatewayError::BackendUnavailable {
                attempts: 3,
                reason: "HTTP 500".into()
            }
        );
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (url, hits, _) = serve(vec![(401, "{\"error\":\"nope\"}".into()), (200, ok_body("x"))]);
        let backend = HttpBackend::new(&config(&url, 3), None).unwrap();
        let err = backend.complete(&CompletionRequest::new("p", 16, 0.5, 1)).unwrap_err();
        assert!(matches!(err, GatewayError::BackendUnavailable { attempts: 1, .. }));
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn malformed_payload_is_reported() {
        let (url, _, _) = serve(vec![(200, "{\"choices\": []}".into())]);
        let backend = HttpBackend::new(&config(&url, 3), None).unwrap();
        let err = backend.complete(&CompletionRequest::new("p", 16, 0.5, 1)).unwrap_err();
        assert!(matches!(err, GatewayError::MalformedResponse(_)));
    }

    #[test]
    fn connection_refused_counts_as_transport_error() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        drop(listener);
        let backend = HttpBackend::new(&config(&url, 1), None).unwrap();
        let err = backend.complete(&CompletionRequest::new("p", 16, 0.5, 1)).unwrap_err();
        assert!(matches!(err, GatewayError::BackendUnavailable { attempts: 2, .. }));
    }
}
