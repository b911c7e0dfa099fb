//! Model access: embeddings and text generation behind one [`Backend`] trait.
//!
//! Two implementations ship:
//!
//! - [`LiveBackend`] talks to an Ollama-compatible local model server over
//!   `POST /api/embeddings` and `POST /api/generate`.
//! - [`MockBackend`] is fully offline and deterministic: a feature-hashing
//!   embedder ([`hash_embed`]) and per-role FIFO queues of scripted replies.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::RoleId;
use crate::par;

/// Environment variable that overrides [`BackendConfig::base_url`].
pub const BASE_URL_ENV: &str = "DELIBERAG_BASE_URL";

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const BODY_SNIPPET: usize = 200;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("input text is empty")]
    EmptyInput,
    #[error("model server at {url} unreachable (timeout {timeout_ms} ms): {reason}")]
    BackendUnreachable {
        url: String,
        timeout_ms: u64,
        reason: String,
    },
    #[error("model server protocol error{}: {body}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    BackendProtocolError { status: Option<u16>, body: String },
    #[error("embedding dimension {got} differs from previously observed {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no scripted response left for role {0}")]
    ScriptExhausted(RoleId),
    #[error("backend returned an empty completion")]
    EmptyCompletion,
    #[error("item {index}: {source}")]
    AtIndex {
        index: usize,
        #[source]
        source: Box<BackendError>,
    },
    #[error("backend configuration: {0}")]
    Config(String),
}

impl BackendError {
    fn at_index(self, index: usize) -> Self {
        BackendError::AtIndex {
            index,
            source: Box::new(self),
        }
    }

    /// The innermost error, with batch-index wrappers removed.
    pub fn root(&self) -> &BackendError {
        match self {
            BackendError::AtIndex { source, .. } => source.root(),
            other => other,
        }
    }
}

/// A finite, non-empty real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, String> {
        if values.is_empty() {
            return Err("embedding has no components".into());
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(format!("embedding component {i} is not finite"));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Multiplies every component by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self, String> {
        Self::new(self.0.iter().map(|v| v * factor).collect())
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = String;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendMode {
    Live,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub mode: BackendMode,
    pub base_url: Option<String>,
    pub embed_model: String,
    pub gen_model: String,
    pub temperature: f64,
    pub timeout_ms: u64,
    pub mock_dim: usize,
    pub mock_script: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            mode: BackendMode::Mock,
            base_url: None,
            embed_model: "mxbai-embed-large".into(),
            gen_model: "llama3.2".into(),
            temperature: 0.0,
            timeout_ms: 120_000,
            mock_dim: 64,
            mock_script: None,
        }
    }
}

impl BackendConfig {
    /// Applies the `DELIBERAG_BASE_URL` override, if set and non-empty.
    pub fn with_env_override(mut self) -> Self {
        if let Ok(url) = std::env::var(BASE_URL_ENV) {
            if !url.trim().is_empty() {
                self.base_url = Some(url);
            }
        }
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(BackendError::Config(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if self.timeout_ms == 0 {
            return Err(BackendError::Config("timeout_ms must be positive".into()));
        }
        match self.mode {
            BackendMode::Live if self.base_url.as_deref().map_or(true, |u| u.trim().is_empty()) => Err(
                BackendError::Config(format!("live mode requires base_url (or {BASE_URL_ENV})")),
            ),
            BackendMode::Mock if self.mock_dim == 0 => Err(BackendError::Config("mock_dim must be positive".into())),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    /// Requesting role. Selects the script queue in mock mode; not sent over the wire.
    pub role: RoleId,
    pub system_prompt: String,
    pub user_prompt: String,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResponse {
    pub text: String,
    pub backend_latency_ms: u64,
}

/// Embedding and generation. Implementations are shareable across threads.
pub trait Backend: Send + Sync {
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, BackendError>;

    /// Element `i` equals `embed_text(texts[i])`. Errors carry the failing index.
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        par::try_map_indexed(texts, |i, t| self.embed_text(t).map_err(|e| e.at_index(i)))
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, BackendError>;

    /// Embedding dimension, once known.
    fn dim(&self) -> Option<usize>;

    fn describe(&self) -> String;
}

impl fmt::Debug for dyn Backend + '_ {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.describe())
    }
}

/// Builds the backend selected by `config.mode`.
pub fn from_config(config: &BackendConfig) -> Result<Box<dyn Backend>, BackendError> {
    config.validate()?;
    Ok(match config.mode {
        BackendMode::Live => Box::new(LiveBackend::new(config.clone())?),
        BackendMode::Mock => {
            let mock = match &config.mock_script {
                Some(path) => MockBackend::from_script_file(config.mock_dim, path)?,
                None => MockBackend::new(config.mock_dim),
            };
            Box::new(mock)
        }
    })
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Lowercased tokens split on every non-alphanumeric character.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Deterministic bag-of-words embedding: each token's FNV-1a hash picks a
/// bucket (`hash mod dim`) whose count is incremented; the count vector is
/// then L2-normalized. Components are non-negative and the norm is 1.
pub fn hash_embed(text: &str, dim: usize) -> Result<EmbeddingVector, BackendError> {
    if dim == 0 {
        return Err(BackendError::Config("embedding dimension must be positive".into()));
    }
    let mut buckets = vec![0.0f64; dim];
    let mut tokens = 0usize;
    for token in tokenize(text) {
        buckets[(fnv1a64(token.as_bytes()) % dim as u64) as usize] += 1.0;
        tokens += 1;
    }
    if tokens == 0 {
        return Err(BackendError::EmptyInput);
    }
    let norm = buckets.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut buckets {
        *v /= norm;
    }
    Ok(EmbeddingVector(buckets))
}

/// Offline backend: hash embeddings plus scripted per-role replies.
pub struct MockBackend {
    dim: usize,
    script: Mutex<HashMap<RoleId, VecDeque<String>>>,
}

impl MockBackend {
    /// A mock with no scripted replies; every `generate` is `ScriptExhausted`.
    pub fn new(dim: usize) -> Self {
        Self::with_script(dim, BTreeMap::new())
    }

    pub fn with_script(dim: usize, script: BTreeMap<RoleId, Vec<String>>) -> Self {
        Self {
            dim,
            script: Mutex::new(script.into_iter().map(|(r, v)| (r, v.into())).collect()),
        }
    }

    /// Loads a script file: a JSON object mapping role id to an array of replies.
    pub fn from_script_file(dim: usize, path: &Path) -> Result<Self, BackendError> {
        let raw = fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("cannot read mock script {}: {e}", path.display())))?;
        let script: BTreeMap<RoleId, Vec<String>> = serde_json::from_str(&raw)
            .map_err(|e| BackendError::Config(format!("invalid mock script {}: {e}", path.display())))?;
        Ok(Self::with_script(dim, script))
    }

    /// Replies still queued for `role`.
    pub fn remaining(&self, role: RoleId) -> usize {
        self.script.lock().unwrap().get(&role).map_or(0, VecDeque::len)
    }
}

impl Backend for MockBackend {
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        if text.trim().is_empty() {
            return Err(BackendError::EmptyInput);
        }
        hash_embed(text, self.dim)
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        let next = self
            .script
            .lock()
            .unwrap()
            .get_mut(&request.role)
            .and_then(VecDeque::pop_front)
            .ok_or(BackendError::ScriptExhausted(request.role))?;
        if next.trim().is_empty() {
            return Err(BackendError::EmptyCompletion);
        }
        Ok(GenerationResponse {
            text: next,
            backend_latency_ms: 0,
        })
    }

    fn dim(&self) -> Option<usize> {
        Some(self.dim)
    }

    fn describe(&self) -> String {
        format!("mock(dim={})", self.dim)
    }
}

#[derive(Serialize)]
struct EmbeddingsBody<'a> {
    model: &'a str,
    prompt: &'a str,
}

#[derive(Deserialize)]
struct EmbeddingsReply {
    embedding: Vec<f64>,
}

#[derive(Serialize)]
struct GenerateBody<'a> {
    model: &'a str,
    system: &'a str,
    prompt: &'a str,
    stream: bool,
    options: GenerateOptions,
}

#[derive(Serialize)]
struct GenerateOptions {
    temperature: f64,
}

#[derive(Deserialize)]
struct GenerateReply {
    response: String,
}

/// Blocking client for an Ollama-compatible model server.
pub struct LiveBackend {
    config: BackendConfig,
    base_url: String,
    client: reqwest::blocking::Client,
    observed_dim: Mutex<Option<usize>>,
}

impl LiveBackend {
    const ATTEMPTS: u32 = 2;
    const BACKOFF_BASE: Duration = Duration::from_millis(500);

    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        let base_url = config
            .base_url
            .clone()
            .ok_or_else(|| BackendError::Config("live mode requires base_url".into()))?
            .trim_end_matches('/')
            .to_string();
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(Self {
            config,
            base_url,
            client,
            observed_dim: Mutex::new(None),
        })
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn post<B: Serialize, R: for<'de> Deserialize<'de>>(&self, endpoint: &str, body: &B) -> Result<R, BackendError> {
        let url = format!("{}{endpoint}", self.base_url);
        let mut attempt = 0;
        let response = loop {
            attempt += 1;
            match self.client.post(&url).json(body).send() {
                Ok(r) => break r,
                Err(e) if (e.is_connect() || e.is_timeout()) && attempt < Self::ATTEMPTS => {
                    let wait = Self::BACKOFF_BASE * 2u32.pow(attempt - 1);
                    log::warn!("{url}: {e}; retrying in {} ms", wait.as_millis());
                    std::thread::sleep(wait);
                }
                Err(e) if e.is_connect() || e.is_timeout() || e.is_request() => {
                    return Err(BackendError::BackendUnreachable {
                        url,
                        timeout_ms: self.config.timeout_ms,
                        reason: e.to_string(),
                    })
                }
                Err(e) => {
                    return Err(BackendError::BackendProtocolError {
                        status: e.status().map(|s| s.as_u16()),
                        body: e.to_string(),
                    })
                }
            }
        };
        let status = response.status();
        let text = response.text().map_err(|e| BackendError::BackendProtocolError {
            status: Some(status.as_u16()),
            body: e.to_string(),
        })?;
        if !status.is_success() {
            return Err(BackendError::BackendProtocolError {
                status: Some(status.as_u16()),
                body: snippet(&text),
            });
        }
        serde_json::from_str(&text).map_err(|e| BackendError::BackendProtocolError {
            status: Some(status.as_u16()),
            body: format!("{e}: {}", snippet(&text)),
        })
    }
}

fn snippet(body: &str) -> String {
    match body.char_indices().nth(BODY_SNIPPET) {
        Some((cut, _)) => format!("{}...", &body[..cut]),
        None => body.to_string(),
    }
}

impl Backend for LiveBackend {
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        if text.trim().is_empty() {
            return Err(BackendError::EmptyInput);
        }
        let reply: EmbeddingsReply = self.post(
            "/api/embeddings",
            &EmbeddingsBody {
                model: &self.config.embed_model,
                prompt: text,
            },
        )?;
        let vector = EmbeddingVector::new(reply.embedding)
            .map_err(|body| BackendError::BackendProtocolError { status: Some(200), body })?;
        let mut observed = self.observed_dim.lock().unwrap();
        match *observed {
            Some(expected) if expected != vector.dim() => {
                return Err(BackendError::DimensionMismatch {
                    expected,
                    got: vector.dim(),
                })
            }
            Some(_) => {}
            None => *observed = Some(vector.dim()),
        }
        Ok(vector)
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        let started = Instant::now();
        let reply: GenerateReply = self.post(
            "/api/generate",
            &GenerateBody {
                model: &self.config.gen_model,
                system: &request.system_prompt,
                prompt: &request.user_prompt,
                stream: false,
                options: GenerateOptions {
                    temperature: request.temperature,
                },
            },
        )?;
        if reply.response.trim().is_empty() {
            return Err(BackendError::EmptyCompletion);
        }
        Ok(GenerationResponse {
            text: reply.response,
            backend_latency_ms: started.elapsed().as_millis() as u64,
        })
    }

    fn dim(&self) -> Option<usize> {
        *self.observed_dim.lock().unwrap()
    }

    fn describe(&self) -> String {
        format!(
            "live({}, embed={}, gen={})",
            self.base_url, self.config.embed_model, self.config.gen_model
        )
    }
}
