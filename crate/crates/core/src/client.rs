//! OpenAI-compatible chat and embeddings client.
//!
//! Successful chat responses and embeddings are cached on disk, one JSON file
//! per content-addressed key, written via temp-file-then-rename so concurrent
//! writers never produce torn entries. A semaphore bounds in-flight requests.
//! Transient failures (429, 5xx, timeouts, connection errors) are retried
//! with exponential backoff; authentication failures are fatal.

use crate::parser::{parse_answer_with, parse_caption, ParsedAnswer, ParserOptions};
use crate::prompts::{CatalogId, RenderedPrompt, Role, Strategy};
use crate::seed::{sample_seed, sha256_hex};
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};
use tokio::sync::Semaphore;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("authentication failed ({status}): {body}")]
    Auth { status: u16, body: String },
    #[error("rate limited")]
    RateLimited { retry_after: Option<Duration> },
    #[error("request timed out")]
    Timeout,
    #[error("connection failed: {0}")]
    Connect(String),
    #[error("http {status}: {body}")]
    Http { status: u16, body: String },
    #[error("giving up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: Box<ClientError> },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("environment variable {0} holding the API key is not set")]
    MissingApiKey(String),
    #[error("invalid decode parameters: {0}")]
    InvalidDecode(String),
    #[error("embedding request with no texts")]
    EmptyInput,
    #[error("call budget exhausted ({0} calls)")]
    BudgetExceeded(u64),
    #[error("cache error at {path}: {message}")]
    Cache { path: PathBuf, message: String },
    #[error("cannot read image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("client setup: {0}")]
    Setup(String),
}

impl ClientError {
    pub fn is_retryable(&self) -> bool {
        match self {
            ClientError::RateLimited { .. } | ClientError::Timeout | ClientError::Connect(_) => true,
            ClientError::Http { status, .. } => *status >= 500,
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    #[default]
    Deterministic,
    Sampling,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub mode: DecodeMode,
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: Option<u32>,
    pub n_samples: u32,
    pub max_tokens: u32,
}

pub const DEFAULT_MAX_TOKENS: u32 = 1024;

impl Default for DecodeParams {
    fn default() -> Self {
        Self::deterministic()
    }
}

impl DecodeParams {
    pub fn deterministic() -> Self {
        DecodeParams {
            mode: DecodeMode::Deterministic,
            temperature: 0.0,
            top_p: 1.0,
            top_k: None,
            n_samples: 1,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    pub fn sampling(n_samples: u32) -> Self {
        DecodeParams {
            mode: DecodeMode::Sampling,
            temperature: 0.6,
            top_p: 0.95,
            top_k: Some(50),
            n_samples,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    /// Validates and applies the mode's forced fields.
    pub fn normalized(&self) -> Result<Self> {
        let mut d = self.clone();
        if d.mode == DecodeMode::Deterministic {
            d.temperature = 0.0;
            d.n_samples = 1;
        }
        if !(d.temperature.is_finite() && d.temperature >= 0.0) {
            return Err(ClientError::InvalidDecode(format!("temperature {}", d.temperature)));
        }
        if !(d.top_p > 0.0 && d.top_p <= 1.0) {
            return Err(ClientError::InvalidDecode(format!("top_p {}", d.top_p)));
        }
        if d.n_samples == 0 {
            return Err(ClientError::InvalidDecode("n_samples must be at least 1".into()));
        }
        if d.max_tokens == 0 {
            return Err(ClientError::InvalidDecode("max_tokens must be positive".into()));
        }
        if d.top_k == Some(0) {
            return Err(ClientError::InvalidDecode("top_k must be positive".into()));
        }
        Ok(d)
    }

    fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("decode params serialize")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
}

/// One model response with everything needed to score and audit it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub cache_key: String,
    pub sample_id: String,
    pub catalog_id: CatalogId,
    pub strategy: Option<Strategy>,
    pub rejection_enabled: bool,
    pub model_id: String,
    pub decode: DecodeParams,
    pub sample_index: u32,
    pub raw_text: String,
    /// Parsed answer for classification catalogs.
    pub parsed: Option<ParsedAnswer>,
    /// Cleaned caption for caption catalogs; `None` if malformed.
    pub caption: Option<String>,
    /// Set when the endpoint answered with an undecodable body.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wire_error: Option<String>,
    pub latency_ms: u64,
    pub token_usage: Option<TokenUsage>,
    pub cache_hit: bool,
    pub started_at_ms: u64,
    pub finished_at_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub model_id: String,
    pub dims: usize,
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(model_id: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(ClientError::MalformedResponse("empty embedding".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ClientError::MalformedResponse("non-finite embedding value".into()));
        }
        Ok(EmbeddingVector { model_id: model_id.into(), dims: values.len(), values })
    }
}

impl AsRef<[f64]> for EmbeddingVector {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    /// Base URL up to and including `/v1`.
    pub base_url: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: Option<String>,
    pub supports_top_k: bool,
    pub supports_seed: bool,
    /// Marks a local mock; exempt from the call budget.
    pub is_mock: bool,
    pub timeout_ms: u64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            base_url: "http://127.0.0.1:8000/v1".into(),
            api_key_env: None,
            supports_top_k: false,
            supports_seed: false,
            is_mock: false,
            timeout_ms: 120_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_retries: 5, base_delay_ms: 500, max_delay_ms: 30_000 }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        let ms = self.base_delay_ms.saturating_mul(1u64 << attempt.min(20)).min(self.max_delay_ms);
        Duration::from_millis(ms)
    }
}

/// Caps checked before a live run. Zero calls means no live traffic.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Budget {
    pub max_calls: u64,
    pub max_tokens: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientConfig {
    pub endpoint: EndpointConfig,
    pub retry: RetryPolicy,
    pub concurrency: usize,
    pub cache_dir: Option<PathBuf>,
    pub budget: Budget,
    pub parser: ParserOptions,
    /// Texts per embeddings request.
    pub embed_batch: usize,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            endpoint: EndpointConfig::default(),
            retry: RetryPolicy::default(),
            concurrency: 8,
            cache_dir: None,
            budget: Budget::default(),
            parser: ParserOptions::default(),
            embed_batch: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BudgetDecision {
    Proceed,
    Refuse(String),
}

/// Decides whether a run of `projected_calls` requests (and optionally
/// `projected_tokens`) fits the configured budget. Mock endpoints always pass.
pub fn run_budget_guard(projected_calls: u64, projected_tokens: Option<u64>, config: &ClientConfig) -> BudgetDecision {
    if config.endpoint.is_mock {
        return BudgetDecision::Proceed;
    }
    let b = &config.budget;
    if projected_calls > b.max_calls {
        return BudgetDecision::Refuse(format!(
            "run needs up to {projected_calls} calls but the budget allows {}",
            b.max_calls
        ));
    }
    if let (Some(cap), Some(t)) = (b.max_tokens, projected_tokens) {
        if t > cap {
            return BudgetDecision::Refuse(format!("run needs up to {t} tokens but the budget allows {cap}"));
        }
    }
    BudgetDecision::Proceed
}

/// Content-addressed identity of one chat query.
pub fn cache_key(
    sample_id: &str,
    catalog_fingerprint: &str,
    prompt_digest: &str,
    model_id: &str,
    decode: &DecodeParams,
    sample_index: u32,
) -> String {
    let parts = [
        "chat",
        sample_id,
        catalog_fingerprint,
        prompt_digest,
        model_id,
        &decode.canonical_json(),
        &sample_index.to_string(),
    ];
    let mut buf = Vec::new();
    for p in parts {
        buf.extend_from_slice(&(p.len() as u64).to_le_bytes());
        buf.extend_from_slice(p.as_bytes());
    }
    sha256_hex(&buf)
}

fn embed_key(model_id: &str, text: &str) -> String {
    sha256_hex(format!("embed\u{1f}{model_id}\u{1f}{}", sha256_hex(text.as_bytes())).as_bytes())
}

#[derive(Serialize, Deserialize)]
struct CachedChat {
    key: String,
    raw_text: String,
    token_usage: Option<TokenUsage>,
}

#[derive(Serialize, Deserialize)]
struct CachedEmbedding {
    key: String,
    values: Vec<f64>,
}

/// One-file-per-key response cache.
#[derive(Clone, Debug)]
pub struct ResponseCache {
    root: PathBuf,
}

impl ResponseCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ResponseCache { root: root.into() }
    }

    pub fn path(&self, key: &str) -> PathBuf {
        self.root.join(&key[..2.min(key.len())]).join(format!("{key}.json"))
    }

    fn get<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<Option<T>> {
        let path = self.path(key);
        match std::fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| ClientError::Cache { path, message: e.to_string() }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(ClientError::Cache { path, message: e.to_string() }),
        }
    }

    fn put<T: Serialize>(&self, key: &str, value: &T) -> Result<()> {
        let path = self.path(key);
        let err = |e: std::io::Error| ClientError::Cache { path: path.clone(), message: e.to_string() };
        let dir = path.parent().expect("cache path has a parent");
        std::fs::create_dir_all(dir).map_err(err)?;
        let bytes = serde_json::to_vec(value).expect("cache entries serialize");
        crate::fsutil::write_atomic(&path, &bytes).map_err(err)
    }

    /// Number of cached entries on disk.
    pub fn len(&self) -> usize {
        walk_json(&self.root)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn walk_json(dir: &Path) -> usize {
    let Ok(rd) = std::fs::read_dir(dir) else { return 0 };
    rd.flatten()
        .map(|e| {
            let p = e.path();
            if p.is_dir() {
                walk_json(&p)
            } else {
                (p.extension().and_then(|x| x.to_str()) == Some("json")) as usize
            }
        })
        .sum()
}

/// Raw outcome of a chat call before parsing.
#[derive(Clone, Debug, PartialEq)]
pub struct ChatResponse {
    pub cache_key: String,
    pub raw_text: String,
    pub token_usage: Option<TokenUsage>,
    pub cache_hit: bool,
    pub latency_ms: u64,
    pub wire_error: Option<String>,
}

#[derive(Default, Debug)]
struct Counters {
    network_calls: AtomicU64,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    cache_hits: AtomicU64,
    retries: AtomicU64,
    prompt_tokens: AtomicU64,
    completion_tokens: AtomicU64,
}

/// Snapshot of client accounting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientStats {
    pub network_calls: u64,
    pub cache_hits: u64,
    pub retries: u64,
    pub max_in_flight: usize,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// Thread-safe client; clone freely.
#[derive(Clone)]
pub struct VlmClient {
    http: reqwest::Client,
    config: Arc<ClientConfig>,
    api_key: Option<String>,
    catalog_fingerprint: String,
    cache: Option<ResponseCache>,
    semaphore: Arc<Semaphore>,
    counters: Arc<Counters>,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

struct InFlight<'a>(&'a Counters);

impl<'a> InFlight<'a> {
    fn enter(c: &'a Counters) -> Self {
        let now = c.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        c.max_in_flight.fetch_max(now, Ordering::SeqCst);
        InFlight(c)
    }
}

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

impl VlmClient {
    pub fn new(config: ClientConfig, catalog_fingerprint: impl Into<String>) -> Result<Self> {
        if config.concurrency == 0 {
            return Err(ClientError::Setup("concurrency must be at least 1".into()));
        }
        let api_key = match &config.endpoint.api_key_env {
            Some(var) => match std::env::var(var) {
                Ok(k) => Some(k),
                Err(_) if config.endpoint.is_mock => None,
                Err(_) => return Err(ClientError::MissingApiKey(var.clone())),
            },
            None => None,
        };
        let http = reqwest::Client::builder()
            .timeout(Duration::from_millis(config.endpoint.timeout_ms))
            .build()
            .map_err(|e| ClientError::Setup(e.to_string()))?;
        let cache = config.cache_dir.as_ref().map(ResponseCache::new);
        Ok(VlmClient {
            http,
            semaphore: Arc::new(Semaphore::new(config.concurrency)),
            config: Arc::new(config),
            api_key,
            catalog_fingerprint: catalog_fingerprint.into(),
            cache,
            counters: Arc::new(Counters::default()),
        })
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    pub fn catalog_fingerprint(&self) -> &str {
        &self.catalog_fingerprint
    }

    pub fn stats(&self) -> ClientStats {
        let c = &self.counters;
        ClientStats {
            network_calls: c.network_calls.load(Ordering::SeqCst),
            cache_hits: c.cache_hits.load(Ordering::SeqCst),
            retries: c.retries.load(Ordering::SeqCst),
            max_in_flight: c.max_in_flight.load(Ordering::SeqCst),
            prompt_tokens: c.prompt_tokens.load(Ordering::SeqCst),
            completion_tokens: c.completion_tokens.load(Ordering::SeqCst),
        }
    }

    pub fn key_for(&self, model_id: &str, prompt: &RenderedPrompt, decode: &DecodeParams, sample_index: u32) -> Result<String> {
        let decode = decode.normalized()?;
        Ok(cache_key(
            &prompt.image().sample_id,
            &self.catalog_fingerprint,
            &prompt.digest(),
            model_id,
            &decode,
            sample_index,
        ))
    }

    /// Sends one chat request (or serves it from cache).
    pub async fn chat(
        &self,
        model_id: &str,
        prompt: &RenderedPrompt,
        decode: &DecodeParams,
        sample_index: u32,
    ) -> Result<ChatResponse> {
        let decode = decode.normalized()?;
        let key = self.key_for(model_id, prompt, &decode, sample_index)?;
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get::<CachedChat>(&key)? {
                self.counters.cache_hits.fetch_add(1, Ordering::SeqCst);
                return Ok(ChatResponse {
                    cache_key: key,
                    raw_text: hit.raw_text,
                    token_usage: hit.token_usage,
                    cache_hit: true,
                    latency_ms: 0,
                    wire_error: None,
                });
            }
        }
        let body = self.chat_body(model_id, prompt, &decode, sample_index)?;
        let started = Instant::now();
        let resp = self.post_with_retry("chat/completions", &body).await?;
        let latency_ms = started.elapsed().as_millis() as u64;
        match decode_chat(&resp) {
            Ok((raw_text, usage)) => {
                if let Some(u) = usage {
                    self.counters.prompt_tokens.fetch_add(u.prompt_tokens, Ordering::SeqCst);
                    self.counters.completion_tokens.fetch_add(u.completion_tokens, Ordering::SeqCst);
                }
                if let Some(cache) = &self.cache {
                    cache.put(&key, &CachedChat { key: key.clone(), raw_text: raw_text.clone(), token_usage: usage })?;
                }
                Ok(ChatResponse { cache_key: key, raw_text, token_usage: usage, cache_hit: false, latency_ms, wire_error: None })
            }
            Err(msg) => {
                tracing::warn!(%key, "undecodable chat response: {msg}");
                Ok(ChatResponse {
                    cache_key: key,
                    raw_text: String::new(),
                    token_usage: None,
                    cache_hit: false,
                    latency_ms,
                    wire_error: Some(msg),
                })
            }
        }
    }

    /// Chat plus parsing into a [`QueryRecord`].
    pub async fn query(
        &self,
        model_id: &str,
        prompt: &RenderedPrompt,
        decode: &DecodeParams,
        sample_index: u32,
    ) -> Result<QueryRecord> {
        let started_at_ms = now_ms();
        let decode = decode.normalized()?;
        let r = self.chat(model_id, prompt, &decode, sample_index).await?;
        let (parsed, caption) = match &prompt.answer_key {
            Some(key) => (
                Some(parse_answer_with(&r.raw_text, key, &prompt.label_space, &prompt.rejection_tokens, &self.config.parser)),
                None,
            ),
            None => (None, parse_caption(&r.raw_text)),
        };
        Ok(QueryRecord {
            cache_key: r.cache_key,
            sample_id: prompt.image().sample_id.clone(),
            catalog_id: prompt.catalog_id,
            strategy: prompt.strategy,
            rejection_enabled: prompt.rejection_enabled,
            model_id: model_id.to_string(),
            decode,
            sample_index,
            raw_text: r.raw_text,
            parsed,
            caption,
            wire_error: r.wire_error,
            latency_ms: r.latency_ms,
            token_usage: r.token_usage,
            cache_hit: r.cache_hit,
            started_at_ms,
            finished_at_ms: now_ms(),
        })
    }

    /// Embeds `texts`, preserving order. Duplicates share one vector.
    pub async fn embed(&self, model_id: &str, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        if texts.is_empty() {
            return Err(ClientError::EmptyInput);
        }
        let mut found: std::collections::HashMap<&str, Vec<f64>> = std::collections::HashMap::new();
        let mut missing: Vec<&str> = Vec::new();
        for t in texts {
            if found.contains_key(t.as_str()) || missing.contains(&t.as_str()) {
                continue;
            }
            let cached = match &self.cache {
                Some(c) => c.get::<CachedEmbedding>(&embed_key(model_id, t))?,
                None => None,
            };
            match cached {
                Some(c) => {
                    self.counters.cache_hits.fetch_add(1, Ordering::SeqCst);
                    found.insert(t, c.values);
                }
                None => missing.push(t),
            }
        }
        for chunk in missing.chunks(self.config.embed_batch.max(1)) {
            let body = json!({ "model": model_id, "input": chunk });
            let resp = self.post_with_retry("embeddings", &body).await?;
            let vectors = decode_embeddings(&resp, chunk.len()).map_err(ClientError::MalformedResponse)?;
            for (t, v) in chunk.iter().zip(vectors) {
                EmbeddingVector::new(model_id, v.clone())?;
                if let Some(c) = &self.cache {
                    let key = embed_key(model_id, t);
                    c.put(&key, &CachedEmbedding { key: key.clone(), values: v.clone() })?;
                }
                found.insert(t, v);
            }
        }
        texts
            .iter()
            .map(|t| EmbeddingVector::new(model_id, found[t.as_str()].clone()))
            .collect()
    }

    fn chat_body(&self, model_id: &str, prompt: &RenderedPrompt, decode: &DecodeParams, sample_index: u32) -> Result<Value> {
        let mut messages = Vec::new();
        for m in &prompt.messages {
            let role = match m.role {
                Role::System => "system",
                Role::User => "user",
            };
            let content = match &m.image {
                None => json!(m.text),
                Some(img) => {
                    let bytes = std::fs::read(&img.path)
                        .map_err(|source| ClientError::Image { path: img.path.clone(), source })?;
                    let mime = if bytes.starts_with(&[0xff, 0xd8]) { "image/jpeg" } else { "image/png" };
                    let url = format!("data:{mime};base64,{}", base64::engine::general_purpose::STANDARD.encode(&bytes));
                    let mut parts = Vec::new();
                    if !m.text.is_empty() {
                        parts.push(json!({ "type": "text", "text": m.text }));
                    }
                    parts.push(json!({ "type": "image_url", "image_url": { "url": url } }));
                    Value::Array(parts)
                }
            };
            messages.push(json!({ "role": role, "content": content }));
        }
        let mut body = json!({
            "model": model_id,
            "messages": messages,
            "temperature": decode.temperature,
            "top_p": decode.top_p,
            "max_tokens": decode.max_tokens,
            "n": 1,
        });
        if let Some(k) = decode.top_k {
            if self.config.endpoint.supports_top_k {
                body["top_k"] = json!(k);
            } else {
                tracing::warn!("endpoint does not accept top_k; dropping top_k={k}");
            }
        }
        if decode.mode == DecodeMode::Sampling && self.config.endpoint.supports_seed {
            body["seed"] = json!(sample_seed(&prompt.image().sample_id, sample_index));
        }
        Ok(body)
    }

    async fn post_with_retry(&self, path: &str, body: &Value) -> Result<Value> {
        let policy = &self.config.retry;
        let mut attempt = 0;
        loop {
            match self.post_once(path, body).await {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < policy.max_retries => {
                    let mut delay = policy.delay(attempt);
                    if let ClientError::RateLimited { retry_after: Some(ra) } = &e {
                        delay = delay.max(*ra).min(Duration::from_millis(policy.max_delay_ms));
                    }
                    tracing::debug!(attempt, ?delay, "retrying after {e}");
                    self.counters.retries.fetch_add(1, Ordering::SeqCst);
                    tokio::time::sleep(delay).await;
                    attempt += 1;
                }
                Err(e) if e.is_retryable() => {
                    return Err(ClientError::RetriesExhausted { attempts: attempt + 1, last: Box::new(e) })
                }
                Err(e) => return Err(e),
            }
        }
    }

    async fn post_once(&self, path: &str, body: &Value) -> Result<Value> {
        let _permit = self.semaphore.acquire().await.expect("semaphore never closed");
        if !self.config.endpoint.is_mock {
            let used = self.counters.network_calls.load(Ordering::SeqCst);
            if used >= self.config.budget.max_calls {
                return Err(ClientError::BudgetExceeded(used));
            }
        }
        let _guard = InFlight::enter(&self.counters);
        self.counters.network_calls.fetch_add(1, Ordering::SeqCst);
        let url = format!("{}/{path}", self.config.endpoint.base_url.trim_end_matches('/'));
        let mut req = self.http.post(url).json(body);
        if let Some(k) = &self.api_key {
            req = req.bearer_auth(k);
        }
        let resp = req.send().await.map_err(map_reqwest)?;
        let status = resp.status().as_u16();
        let retry_after = resp
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|s| s.trim().parse::<f64>().ok())
            .map(Duration::from_secs_f64);
        let text = resp.text().await.map_err(map_reqwest)?;
        match status {
            200..=299 => serde_json::from_str(&text).or(Ok(Value::String(text))),
            401 | 403 => Err(ClientError::Auth { status, body: text }),
            429 => Err(ClientError::RateLimited { retry_after }),
            408 => Err(ClientError::Timeout),
            _ => Err(ClientError::Http { status, body: text }),
        }
    }
}

fn map_reqwest(e: reqwest::Error) -> ClientError {
    if e.is_timeout() {
        ClientError::Timeout
    } else if e.is_connect() || e.is_request() || e.is_body() {
        ClientError::Connect(e.to_string())
    } else {
        ClientError::MalformedResponse(e.to_string())
    }
}

fn decode_chat(v: &Value) -> std::result::Result<(String, Option<TokenUsage>), String> {
    let content = v
        .pointer("/choices/0/message/content")
        .ok_or_else(|| "missing choices[0].message.content".to_string())?;
    let text = match content {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join(""),
        other => return Err(format!("unexpected content {other}")),
    };
    let usage = v.get("usage").and_then(|u| serde_json::from_value::<TokenUsage>(u.clone()).ok());
    Ok((text, usage))
}

fn decode_embeddings(v: &Value, expected: usize) -> std::result::Result<Vec<Vec<f64>>, String> {
    let data = v.get("data").and_then(Value::as_array).ok_or("missing data array")?;
    if data.len() != expected {
        return Err(format!("expected {expected} embeddings, got {}", data.len()));
    }
    let mut out: Vec<Option<Vec<f64>>> = vec![None; expected];
    for (pos, item) in data.iter().enumerate() {
        let idx = item.get("index").and_then(Value::as_u64).map(|i| i as usize).unwrap_or(pos);
        let values: Vec<f64> = serde_json::from_value(item.get("embedding").cloned().ok_or("missing embedding")?)
            .map_err(|e| e.to_string())?;
        *out.get_mut(idx).ok_or("embedding index out of range")? = Some(values);
    }
    out.into_iter().map(|v| v.ok_or_else(|| "missing embedding index".to_string())).collect()
}
