//! Run definition file. Runs have many knobs, so they live in one TOML file
//! stored next to the outputs; command-line flags act as overrides only.
//! Unknown keys are rejected, and everything is validated before any network
//! access.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use mac_core::agents::PromptTemplates;
use mac_core::backend::{
    BackendConfig, ChatBackend, PolicyMock, RemoteBackend, SamplingProfile, ScriptedMock,
};
use mac_core::optimizer::RunConfig;
use mac_core::retrieval::{Embedder, LexicalEmbedder, RemoteEmbedder, RetrievalStrategy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Pii,
    Tool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub path: PathBuf,
    #[serde(default = "default_task")]
    pub task: TaskKind,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    #[serde(default)]
    pub allow_empty_text: bool,
}

fn default_task() -> TaskKind {
    TaskKind::Pii
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    #[serde(default)]
    pub base_url: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_connection_retries: u32,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub script_path: Option<PathBuf>,
    /// Pattern library override for the policy mock.
    #[serde(default)]
    pub policy_rules: Option<Vec<String>>,
}

fn default_timeout() -> u64 {
    120
}

fn default_retries() -> u32 {
    3
}

fn default_in_flight() -> usize {
    8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackendKind {
    #[serde(rename = "remote")]
    Remote,
    #[serde(rename = "mock-script")]
    MockScript,
    #[serde(rename = "mock-policy")]
    MockPolicy,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSection {
    pub temperature: Option<f64>,
    pub top_p: Option<f64>,
    pub top_k: Option<u32>,
    pub repetition_penalty: Option<f64>,
    pub max_tokens_annotator: Option<u32>,
    pub max_tokens_rules: Option<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalSection {
    pub strategy: RetrievalStrategy,
    pub embedder: EmbedderKind,
    pub embedding_model: Option<String>,
    pub k: usize,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        Self {
            strategy: RetrievalStrategy::Similarity,
            embedder: EmbedderKind::Lexical,
            embedding_model: None,
            k: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    Lexical,
    Remote,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PromptsSection {
    pub dir: Option<PathBuf>,
}

/// The full run definition.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub output_dir: PathBuf,
    pub corpus: CorpusSection,
    #[serde(default)]
    pub run: RunConfig,
    pub backend: BackendSection,
    #[serde(default)]
    pub sampling: SamplingSection,
    #[serde(default)]
    pub retrieval: RetrievalSection,
    #[serde(default)]
    pub prompts: PromptsSection,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let config: ConfigFile = toml::from_str(&body)
            .map_err(|e| anyhow::Error::new(ConfigParse(e.to_string())))
            .context("invalid config file")?;
        config.validate()?;
        Ok(config)
    }

    /// Structural validation; runs before any backend is constructed.
    pub fn validate(&self) -> Result<()> {
        self.run
            .validate()
            .map_err(|e| anyhow::Error::new(ConfigParse(e.to_string())))?;
        match self.backend.kind {
            BackendKind::Remote => {
                let Some(base_url) = &self.backend.base_url else {
                    bail!(ConfigParse("backend.base_url is required for kind = \"remote\"".into()));
                };
                if let Err(e) = url_check(base_url) {
                    bail!(ConfigParse(format!("backend.base_url: {e}")));
                }
                if self.backend.model.is_none() {
                    bail!(ConfigParse("backend.model is required for kind = \"remote\"".into()));
                }
            }
            BackendKind::MockScript => {
                if self.backend.script_path.is_none() {
                    bail!(ConfigParse(
                        "backend.script_path is required for kind = \"mock-script\"".into()
                    ));
                }
            }
            BackendKind::MockPolicy => {}
        }
        if self.retrieval.embedder == EmbedderKind::Remote {
            if self.backend.base_url.is_none() {
                bail!(ConfigParse(
                    "retrieval.embedder = \"remote\" requires backend.base_url".into()
                ));
            }
            if self.retrieval.embedding_model.is_none() {
                bail!(ConfigParse(
                    "retrieval.embedder = \"remote\" requires retrieval.embedding_model".into()
                ));
            }
        }
        Ok(())
    }

    pub fn build_backend(&self) -> Result<Box<dyn ChatBackend>> {
        match self.backend.kind {
            BackendKind::Remote => {
                let cfg = BackendConfig {
                    base_url: self.backend.base_url.clone().unwrap_or_default(),
                    model_name: self.backend.model.clone().unwrap_or_default(),
                    api_key_env_var: self.backend.api_key_env.clone(),
                    timeout_secs: self.backend.timeout_secs,
                    max_connection_retries: self.backend.max_connection_retries,
                    max_in_flight: self.backend.max_in_flight,
                };
                Ok(Box::new(RemoteBackend::new(cfg)?))
            }
            BackendKind::MockScript => {
                let path = self.backend.script_path.as_ref().expect("validated");
                Ok(Box::new(ScriptedMock::from_file(path)?))
            }
            BackendKind::MockPolicy => Ok(Box::new(match &self.backend.policy_rules {
                Some(rules) => PolicyMock::with_library(rules.clone()),
                None => PolicyMock::default(),
            })),
        }
    }

    pub fn build_embedder(&self) -> Result<Option<Arc<dyn Embedder>>> {
        match self.retrieval.embedder {
            EmbedderKind::Lexical => Ok(Some(Arc::new(LexicalEmbedder::default()))),
            EmbedderKind::Remote => {
                let base_url = self.backend.base_url.as_deref().expect("validated");
                let model = self.retrieval.embedding_model.as_deref().expect("validated");
                Ok(Some(Arc::new(RemoteEmbedder::new(
                    base_url,
                    model,
                    self.backend.api_key_env.as_deref(),
                    self.backend.timeout_secs,
                )?)))
            }
        }
    }

    pub fn templates(&self) -> Result<PromptTemplates> {
        match &self.prompts.dir {
            Some(dir) => PromptTemplates::with_overrides(dir)
                .with_context(|| format!("loading prompt overrides from {}", dir.display())),
            None => Ok(PromptTemplates::default()),
        }
    }

    pub fn sampling_profile(&self) -> SamplingProfile {
        let mut profile = SamplingProfile::default();
        let s = &self.sampling;
        for params in [
            &mut profile.annotator,
            &mut profile.decision,
            &mut profile.creator,
            &mut profile.editor,
        ] {
            if let Some(t) = s.temperature {
                params.temperature = t;
            }
            if let Some(p) = s.top_p {
                params.top_p = p;
            }
            if let Some(k) = s.top_k {
                params.top_k = Some(k);
            }
            if let Some(r) = s.repetition_penalty {
                params.repetition_penalty = r;
            }
        }
        if let Some(m) = s.max_tokens_annotator {
            profile.annotator.max_tokens = m;
        }
        if let Some(m) = s.max_tokens_rules {
            profile.decision.max_tokens = m;
            profile.creator.max_tokens = m;
            profile.editor.max_tokens = m;
        }
        profile
    }
}

fn url_check(raw: &str) -> Result<(), String> {
    let rest = raw
        .strip_prefix("http://")
        .or_else(|| raw.strip_prefix("https://"))
        .ok_or_else(|| format!("{raw:?} must start with http:// or https://"))?;
    let host = rest.split('/').next().unwrap_or_default();
    if host.is_empty() {
        return Err(format!("{raw:?} has no host"));
    }
    Ok(())
}

/// Config-level failure; mapped to exit code 2.
#[derive(Debug)]
pub struct ConfigParse(pub String);

impl std::fmt::Display for ConfigParse {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigParse {}
