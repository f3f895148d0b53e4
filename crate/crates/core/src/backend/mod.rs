//! Chat-completion backends: a remote OpenAI-compatible client for real runs
//! and deterministic mocks (scripted queues or an interpretable regex-rule
//! policy) for hermetic tests.
//!
//! Backends are safely callable from multiple in-flight requests; each keeps
//! a monotone per-role completion counter queried by the optimizer's budget
//! tracker.

mod mock;
mod remote;

pub use mock::{PolicyMock, ScriptedMock, DEFAULT_RULE_LIBRARY};
pub use remote::RemoteBackend;

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{AgentRole, PromptMessages};

/// Sampling parameters for one completion request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: Option<u32>,
    pub repetition_penalty: f64,
    pub max_tokens: u32,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 0.9,
            top_k: Some(50),
            repetition_penalty: 1.0,
            max_tokens: 512,
        }
    }
}

impl SamplingParams {
    /// Role defaults: the annotator gets more headroom for long phrase lists;
    /// the rule agents emit short JSON.
    pub fn for_role(role: AgentRole) -> Self {
        let max_tokens = match role {
            AgentRole::Annotator => 1024,
            _ => 512,
        };
        Self {
            max_tokens,
            ..Self::default()
        }
    }

    /// Copy with the temperature replaced; everything else unchanged.
    pub fn with_temperature(&self, temperature: f64) -> Self {
        Self {
            temperature,
            ..self.clone()
        }
    }
}

/// Base sampling parameters per role. Retry attempts raise the temperature
/// on top of these.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingProfile {
    pub annotator: SamplingParams,
    pub decision: SamplingParams,
    pub creator: SamplingParams,
    pub editor: SamplingParams,
}

impl Default for SamplingProfile {
    fn default() -> Self {
        Self {
            annotator: SamplingParams::for_role(AgentRole::Annotator),
            decision: SamplingParams::for_role(AgentRole::Decision),
            creator: SamplingParams::for_role(AgentRole::Creator),
            editor: SamplingParams::for_role(AgentRole::Editor),
        }
    }
}

impl SamplingProfile {
    pub fn for_role(&self, role: AgentRole) -> &SamplingParams {
        match role {
            AgentRole::Annotator => &self.annotator,
            AgentRole::Decision => &self.decision,
            AgentRole::Creator => &self.creator,
            AgentRole::Editor => &self.editor,
        }
    }
}

/// Remote backend configuration. The API key is read from the named
/// environment variable only; it never appears in config files or traces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendConfig {
    pub base_url: String,
    pub model_name: String,
    #[serde(default)]
    pub api_key_env_var: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_connection_retries: u32,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn default_timeout_secs() -> u64 {
    120
}

fn default_retries() -> u32 {
    3
}

fn default_in_flight() -> usize {
    8
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport failure after {attempts} attempts: {detail}")]
    Transport { attempts: u32, detail: String },
    #[error("authentication failed (HTTP {status}); check the {env_var} environment variable")]
    Auth { status: u16, env_var: String },
    #[error("HTTP {status}: {detail}")]
    Http { status: u16, detail: String },
    #[error("backend returned an empty completion")]
    EmptyCompletion,
    #[error("malformed completion response: {0}")]
    BadResponse(String),
    #[error("invalid backend configuration: {0}")]
    BadConfig(String),
    #[error("environment variable {0} is not set")]
    MissingApiKey(String),
    #[error("mock script exhausted for role {0}")]
    ScriptExhausted(AgentRole),
}

/// One completion with request latency metadata.
#[derive(Debug, Clone)]
pub struct Completion {
    pub text: String,
    pub latency: Duration,
}

/// Abstract chat-completion access.
pub trait ChatBackend: Send + Sync {
    fn complete(
        &self,
        role: AgentRole,
        messages: &PromptMessages,
        params: &SamplingParams,
    ) -> Result<Completion, BackendError>;

    /// Monotone count of completions served for `role`.
    fn call_count(&self, role: AgentRole) -> u64;

    /// Upper bound on concurrent in-flight requests callers should issue.
    fn max_in_flight(&self) -> usize {
        1
    }
}

/// Per-role monotone completion counters.
#[derive(Debug, Default)]
pub struct CallCounters {
    counts: [AtomicU64; 4],
}

impl CallCounters {
    pub fn bump(&self, role: AgentRole) {
        self.counts[role.index()].fetch_add(1, Ordering::Relaxed);
    }

    pub fn get(&self, role: AgentRole) -> u64 {
        self.counts[role.index()].load(Ordering::Relaxed)
    }
}
