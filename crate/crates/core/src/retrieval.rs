//! Retrieval-augmented inference: pick k training examples per query
//! (random or cosine-similarity over embeddings) and inject them as few-shot
//! demonstrations at annotation time. The constitution itself is never
//! touched — retrieval applies only at inference.
//!
//! Two embedders ship: a remote OpenAI-compatible embeddings endpoint (so a
//! served sentence-transformer can be used) and a deterministic lexical
//! fallback (hashed bag-of-words with TF weighting) that keeps the module
//! hermetically testable.

use std::sync::Arc;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{
    build_annotator_prompt, parse_annotator_output, AgentError, AgentRole, PromptMessages,
    PromptTemplates,
};
use crate::backend::{BackendError, ChatBackend, SamplingParams};
use crate::constitution::Constitution;
use crate::corpus::{Document, LabeledDoc};

/// Fallback embedder dimension.
pub const LEXICAL_DIM: usize = 512;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot build an index over an empty train split")]
    EmptyTrain,
    #[error("k={k} exceeds the {available} available candidates after self-exclusion")]
    InvalidK { k: usize, available: usize },
    #[error("similarity strategy requires an embedder")]
    MissingEmbedder,
    #[error("embedder failure: {0}")]
    Embedder(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Parse(#[from] AgentError),
}

/// Text → fixed-dimension vector contract.
pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f32>, RetrievalError>;
}

/// Deterministic hashed bag-of-words embedder: lowercase alphanumeric tokens,
/// FNV-1a bucketing, TF weights, unit-normalized. Pure and platform-stable.
#[derive(Debug, Clone)]
pub struct LexicalEmbedder {
    dim: usize,
}

impl Default for LexicalEmbedder {
    fn default() -> Self {
        Self { dim: LEXICAL_DIM }
    }
}

impl LexicalEmbedder {
    pub fn new(dim: usize) -> Self {
        Self { dim: dim.max(1) }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

fn fnv1a(token: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in token.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x100_0000_01b3);
    }
    hash
}

impl Embedder for LexicalEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f32>, RetrievalError> {
        let mut vector = vec![0f32; self.dim];
        for token in text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
        {
            let token = token.to_lowercase();
            let bucket = (fnv1a(&token) % self.dim as u64) as usize;
            vector[bucket] += 1.0;
        }
        normalize(&mut vector);
        Ok(vector)
    }
}

/// OpenAI-compatible `/v1/embeddings` client.
pub struct RemoteEmbedder {
    base_url: String,
    model: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl RemoteEmbedder {
    pub fn new(
        base_url: &str,
        model: &str,
        api_key_env_var: Option<&str>,
        timeout_secs: u64,
    ) -> Result<Self, RetrievalError> {
        let api_key = match api_key_env_var {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                RetrievalError::Embedder(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(timeout_secs))
            .build()
            .map_err(|e| RetrievalError::Embedder(e.to_string()))?;
        Ok(Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key,
            client,
        })
    }
}

impl Embedder for RemoteEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f32>, RetrievalError> {
        let mut req = self
            .client
            .post(format!("{}/v1/embeddings", self.base_url))
            .json(&serde_json::json!({ "model": self.model, "input": text }));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| RetrievalError::Embedder(e.to_string()))?;
        let status = resp.status().as_u16();
        let body: serde_json::Value = resp
            .json()
            .map_err(|e| RetrievalError::Embedder(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(RetrievalError::Embedder(format!("HTTP {status}: {body}")));
        }
        let values = body["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| RetrievalError::Embedder("missing data[0].embedding".into()))?;
        Ok(values
            .iter()
            .map(|v| v.as_f64().unwrap_or(0.0) as f32)
            .collect())
    }
}

fn normalize(vector: &mut [f32]) {
    let norm = vector.iter().map(|x| x * x).sum::<f32>().sqrt();
    if norm > 0.0 {
        for x in vector.iter_mut() {
            *x /= norm;
        }
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Demonstration selection strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalStrategy {
    Random,
    Similarity,
}

impl std::str::FromStr for RetrievalStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "random" => Ok(Self::Random),
            "similarity" => Ok(Self::Similarity),
            other => Err(format!("unknown retrieval strategy {other:?}")),
        }
    }
}

/// Immutable index over the train split. Similarity mode caches one
/// unit-normalized vector per document; random mode stores entries only.
pub struct RetrievalIndex {
    strategy: RetrievalStrategy,
    entries: Vec<LabeledDoc>,
    vectors: Vec<Vec<f32>>,
    embedder: Option<Arc<dyn Embedder>>,
}

impl RetrievalIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn strategy(&self) -> RetrievalStrategy {
        self.strategy
    }
}

/// Build the index: embeddings are computed once here and cached.
pub fn build_index(
    train: &[LabeledDoc],
    embedder: Option<Arc<dyn Embedder>>,
    strategy: RetrievalStrategy,
) -> Result<RetrievalIndex, RetrievalError> {
    if train.is_empty() {
        return Err(RetrievalError::EmptyTrain);
    }
    let vectors = match strategy {
        RetrievalStrategy::Random => Vec::new(),
        RetrievalStrategy::Similarity => {
            let embedder = embedder.as_ref().ok_or(RetrievalError::MissingEmbedder)?;
            train
                .iter()
                .map(|rec| {
                    let mut v = embedder.embed(&rec.doc.text)?;
                    normalize(&mut v);
                    Ok(v)
                })
                .collect::<Result<Vec<_>, RetrievalError>>()?
        }
    };
    Ok(RetrievalIndex {
        strategy,
        entries: train.to_vec(),
        vectors,
        embedder,
    })
}

/// Select `k` demonstrations for `query`. The query document is excluded when
/// its id appears in the index. Similarity mode returns top-k by cosine with
/// ties broken by document id ascending; random mode is a seeded sample
/// without replacement.
pub fn retrieve(
    index: &RetrievalIndex,
    query: &Document,
    k: usize,
    seed: u64,
) -> Result<Vec<LabeledDoc>, RetrievalError> {
    let candidates: Vec<usize> = (0..index.entries.len())
        .filter(|&i| index.entries[i].doc.id != query.id)
        .collect();
    if k == 0 || k > candidates.len() {
        return Err(RetrievalError::InvalidK {
            k,
            available: candidates.len(),
        });
    }
    match index.strategy {
        RetrievalStrategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let picked = rand::seq::index::sample(&mut rng, candidates.len(), k);
            Ok(picked
                .into_iter()
                .map(|i| index.entries[candidates[i]].clone())
                .collect())
        }
        RetrievalStrategy::Similarity => {
            let embedder = index.embedder.as_ref().ok_or(RetrievalError::MissingEmbedder)?;
            let mut qv = embedder.embed(&query.text)?;
            normalize(&mut qv);
            let mut scored: Vec<(f32, usize)> = candidates
                .into_iter()
                .map(|i| (dot(&index.vectors[i], &qv), i))
                .collect();
            scored.sort_by(|(sa, ia), (sb, ib)| {
                sb.partial_cmp(sa)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then_with(|| index.entries[*ia].doc.id.cmp(&index.entries[*ib].doc.id))
            });
            Ok(scored
                .into_iter()
                .take(k)
                .map(|(_, i)| index.entries[i].clone())
                .collect())
        }
    }
}

/// The annotator prompt with retrieved demonstrations; `k = 0` degenerates to
/// the plain annotation prompt, byte-identical.
pub fn retrieval_prompt(
    doc: &Document,
    c: &Constitution,
    index: &RetrievalIndex,
    k: usize,
    seed: u64,
    templates: &PromptTemplates,
) -> Result<PromptMessages, RetrievalError> {
    let demos = if k == 0 {
        Vec::new()
    } else {
        retrieve(index, doc, k, seed)?
    };
    Ok(build_annotator_prompt(doc, c, &demos, templates))
}

/// Retrieval-augmented annotation of one document. The constitution is read,
/// never modified.
#[allow(clippy::too_many_arguments)]
pub fn annotate_with_retrieval(
    doc: &Document,
    c: &Constitution,
    index: &RetrievalIndex,
    k: usize,
    seed: u64,
    backend: &dyn ChatBackend,
    params: &SamplingParams,
    templates: &PromptTemplates,
) -> Result<Vec<String>, RetrievalError> {
    let messages = retrieval_prompt(doc, c, index, k, seed, templates)?;
    let completion = backend.complete(AgentRole::Annotator, &messages, params)?;
    Ok(parse_annotator_output(&completion.text)?.phrases)
}

/// Few-shot provider for batch evaluation: per-query demonstrations from the
/// index, with the random strategy deriving a per-document seed so selections
/// are deterministic per query.
pub fn fewshot_provider<'a>(
    index: &'a RetrievalIndex,
    k: usize,
    seed: u64,
) -> impl Fn(&LabeledDoc) -> Result<Vec<LabeledDoc>, String> + Sync + 'a {
    move |query: &LabeledDoc| {
        if k == 0 {
            return Ok(Vec::new());
        }
        let per_doc_seed = seed ^ fnv1a(&query.doc.id);
        retrieve(index, &query.doc, k, per_doc_seed).map_err(|e| e.to_string())
    }
}
