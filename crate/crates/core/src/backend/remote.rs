//! OpenAI-compatible chat-completions client with retry/backoff.
//!
//! `top_k` and `repetition_penalty` are protocol extensions (served by vLLM
//! and compatible stacks but not by the baseline API). They are included
//! until the endpoint rejects them once with HTTP 400, after which they are
//! omitted for the rest of the process.

use std::sync::atomic::{AtomicU8, Ordering};
use std::time::{Duration, Instant};

use serde_json::json;

use super::{BackendConfig, BackendError, CallCounters, ChatBackend, Completion, SamplingParams};
use crate::agents::{AgentRole, PromptMessages};

const EXT_UNPROBED: u8 = 0;
const EXT_SUPPORTED: u8 = 1;
const EXT_UNSUPPORTED: u8 = 2;

pub struct RemoteBackend {
    cfg: BackendConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    counters: CallCounters,
    ext_state: AtomicU8,
}

// Manual impl so the API key can never leak through debug formatting.
impl std::fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteBackend")
            .field("base_url", &self.cfg.base_url)
            .field("model_name", &self.cfg.model_name)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish_non_exhaustive()
    }
}

impl RemoteBackend {
    /// Validate the config, read the API key from the environment (never from
    /// the config itself), and build the HTTP client.
    pub fn new(cfg: BackendConfig) -> Result<Self, BackendError> {
        let url = reqwest::Url::parse(&cfg.base_url)
            .map_err(|e| BackendError::BadConfig(format!("base_url {:?}: {e}", cfg.base_url)))?;
        if !matches!(url.scheme(), "http" | "https") {
            return Err(BackendError::BadConfig(format!(
                "base_url {:?}: unsupported scheme {:?}",
                cfg.base_url,
                url.scheme()
            )));
        }
        if cfg.model_name.is_empty() {
            return Err(BackendError::BadConfig("model_name is empty".into()));
        }
        let api_key = match &cfg.api_key_env_var {
            Some(var) => Some(
                std::env::var(var).map_err(|_| BackendError::MissingApiKey(var.clone()))?,
            ),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| BackendError::BadConfig(e.to_string()))?;
        Ok(Self {
            cfg,
            api_key,
            client,
            counters: CallCounters::default(),
            ext_state: AtomicU8::new(EXT_UNPROBED),
        })
    }

    fn completions_url(&self) -> String {
        format!(
            "{}/v1/chat/completions",
            self.cfg.base_url.trim_end_matches('/')
        )
    }

    fn request_body(
        &self,
        messages: &PromptMessages,
        params: &SamplingParams,
        with_extensions: bool,
    ) -> serde_json::Value {
        let mut body = json!({
            "model": self.cfg.model_name,
            "messages": [
                {"role": "system", "content": messages.system},
                {"role": "user", "content": messages.user},
            ],
            "temperature": params.temperature,
            "top_p": params.top_p,
            "max_tokens": params.max_tokens,
        });
        if with_extensions {
            if let Some(top_k) = params.top_k {
                body["top_k"] = json!(top_k);
            }
            if params.repetition_penalty != 1.0 {
                body["repetition_penalty"] = json!(params.repetition_penalty);
            }
        }
        body
    }

    fn send_once(
        &self,
        body: &serde_json::Value,
        attempts_so_far: u32,
    ) -> Result<reqwest::blocking::Response, BackendError> {
        let mut req = self.client.post(self.completions_url()).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        req.send().map_err(|e| BackendError::Transport {
            attempts: attempts_so_far + 1,
            detail: e.to_string(),
        })
    }

    fn parse_response(&self, status: u16, text: &str) -> Result<String, BackendError> {
        if status == 401 || status == 403 {
            return Err(BackendError::Auth {
                status,
                env_var: self
                    .cfg
                    .api_key_env_var
                    .clone()
                    .unwrap_or_else(|| "(none configured)".into()),
            });
        }
        if !(200..300).contains(&status) {
            return Err(BackendError::Http {
                status,
                detail: truncated(text, 300),
            });
        }
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| BackendError::BadResponse(e.to_string()))?;
        let content = value["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| {
                BackendError::BadResponse("missing choices[0].message.content".into())
            })?;
        if content.trim().is_empty() {
            return Err(BackendError::EmptyCompletion);
        }
        Ok(content.to_string())
    }
}

fn truncated(text: &str, cap: usize) -> String {
    if text.len() <= cap {
        text.to_string()
    } else {
        let mut end = cap;
        while !text.is_char_boundary(end) {
            end -= 1;
        }
        format!("{}…", &text[..end])
    }
}

fn mentions_extension(body: &str) -> bool {
    body.contains("top_k") || body.contains("repetition_penalty")
}

impl ChatBackend for RemoteBackend {
    fn complete(
        &self,
        role: AgentRole,
        messages: &PromptMessages,
        params: &SamplingParams,
    ) -> Result<Completion, BackendError> {
        let started = Instant::now();
        let mut with_ext =
            self.ext_state.load(Ordering::Relaxed) != EXT_UNSUPPORTED && params.top_k.is_some();
        let mut attempt = 0u32;
        loop {
            let body = self.request_body(messages, params, with_ext);
            match self.send_once(&body, attempt) {
                Ok(resp) => {
                    let status = resp.status().as_u16();
                    let text = resp.text().map_err(|e| BackendError::Transport {
                        attempts: attempt + 1,
                        detail: e.to_string(),
                    })?;
                    if status == 400 && with_ext && mentions_extension(&text) {
                        // Endpoint rejects the extension params; drop them from
                        // here on and retry this request once.
                        self.ext_state.store(EXT_UNSUPPORTED, Ordering::Relaxed);
                        log::info!("endpoint rejected sampling extensions; omitting top_k/repetition_penalty");
                        with_ext = false;
                        continue;
                    }
                    let content = self.parse_response(status, &text)?;
                    if with_ext {
                        self.ext_state.store(EXT_SUPPORTED, Ordering::Relaxed);
                    }
                    self.counters.bump(role);
                    return Ok(Completion {
                        text: content,
                        latency: started.elapsed(),
                    });
                }
                Err(err) => {
                    if attempt >= self.cfg.max_connection_retries {
                        return Err(err);
                    }
                    let backoff = Duration::from_millis(200u64.saturating_mul(1 << attempt.min(6)));
                    log::warn!("transport error (attempt {}): retrying in {backoff:?}", attempt + 1);
                    std::thread::sleep(backoff);
                    attempt += 1;
                }
            }
        }
    }

    fn call_count(&self, role: AgentRole) -> u64 {
        self.counters.get(role)
    }

    fn max_in_flight(&self) -> usize {
        self.cfg.max_in_flight.max(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(base: &str) -> BackendConfig {
        BackendConfig {
            base_url: base.into(),
            model_name: "test-model".into(),
            api_key_env_var: None,
            timeout_secs: 5,
            max_connection_retries: 0,
            max_in_flight: 2,
        }
    }

    #[test]
    fn rejects_malformed_base_url() {
        let err = RemoteBackend::new(cfg("not a url")).unwrap_err();
        assert!(matches!(err, BackendError::BadConfig(_)));
    }

    #[test]
    fn rejects_missing_api_key_env() {
        let mut c = cfg("http://localhost:9");
        c.api_key_env_var = Some("MAC_DEFINITELY_UNSET_VAR".into());
        let err = RemoteBackend::new(c).unwrap_err();
        assert!(matches!(err, BackendError::MissingApiKey(v) if v == "MAC_DEFINITELY_UNSET_VAR"));
    }

    #[test]
    fn auth_error_names_env_var() {
        std::env::set_var("MAC_AUTH_TEST_KEY", "k");
        let mut c = cfg("http://localhost:9");
        c.api_key_env_var = Some("MAC_AUTH_TEST_KEY".into());
        let backend = RemoteBackend::new(c).unwrap();
        let err = backend.parse_response(401, "unauthorized").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("MAC_AUTH_TEST_KEY"), "{msg}");
    }

    #[test]
    fn empty_completion_is_typed() {
        let backend = RemoteBackend::new(cfg("http://localhost:9")).unwrap();
        let body = r#"{"choices":[{"message":{"content":"  "}}]}"#;
        assert!(matches!(
            backend.parse_response(200, body),
            Err(BackendError::EmptyCompletion)
        ));
    }

    #[test]
    fn parses_content() {
        let backend = RemoteBackend::new(cfg("http://localhost:9")).unwrap();
        let body = r#"{"choices":[{"message":{"content":"hello"}}]}"#;
        assert_eq!(backend.parse_response(200, body).unwrap(), "hello");
    }
}
