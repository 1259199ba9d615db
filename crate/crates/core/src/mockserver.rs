//! Scripted OpenAI-compatible stub for hermetic tests.
//!
//! The mock never looks at pixels. It recognizes an attached image by the
//! SHA-256 of its bytes, looked up in the manifests it was started with, and
//! answers according to the first script rule whose matcher accepts the
//! request. Responses are pure functions of (script, request); only the
//! failure-injection counters carry state.
//!
//! Script format (JSON):
//!
//! ```json
//! {
//!   "rules": [
//!     { "when": { "truth": "anomaly", "rejection": true }, "respond": "Answer: unknown" },
//!     { "when": { "min_severity": 3, "bucket": { "modulus": 2, "remainder": 0 } },
//!       "respond": "Label: unknown", "fail": { "status": 429, "times": 2 } }
//!   ],
//!   "default": { "respond": "Answer: {class}" },
//!   "embedding": { "mode": "gaussian", "dims": 64 }
//! }
//! ```
//!
//! Placeholders: `{class}`, `{wrong_class}`, `{id}`, `{severity}`,
//! `{sample_index}`, `{variant}`.

use crate::corpus::{CorruptionKind, Manifest, TruthRole};
use crate::prompts::PromptCatalog;
use crate::seed::{derive, sample_seed, sha256_hex};
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

#[derive(Debug, thiserror::Error)]
pub enum MockError {
    #[error("invalid script: {0}")]
    Script(String),
    #[error("cannot read script {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, MockError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthMatch {
    Anomaly,
    InLabelSpace,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bucket {
    pub modulus: u64,
    pub remainder: u64,
}

/// All present conditions must hold. An empty matcher accepts everything.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Matcher {
    pub image_id: Option<String>,
    pub truth: Option<TruthMatch>,
    pub class: Option<String>,
    pub min_severity: Option<u8>,
    pub max_severity: Option<u8>,
    pub kind: Option<CorruptionKind>,
    pub ambiguity_bin: Option<u8>,
    pub prompt_contains: Option<String>,
    pub prompt_lacks: Option<String>,
    /// Whether the prompt carries a rejection clause from the catalog.
    pub rejection: Option<bool>,
    /// Deterministic pseudo-random split on the image id.
    pub bucket: Option<Bucket>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variants {
    /// `{variant}` cycles through `n` values by sample index.
    Fixed(u32),
    /// `{variant}` cycles through `severity + 1` values.
    SeverityPlusOne,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FailureSpec {
    /// HTTP status to return; ignored when `hang_ms` is set.
    pub status: u16,
    /// Stall this long before answering (to trip client timeouts).
    pub hang_ms: Option<u64>,
    /// Number of failing attempts per distinct request.
    pub times: u32,
}

impl Default for FailureSpec {
    fn default() -> Self {
        FailureSpec { status: 429, hang_ms: None, times: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Rule {
    pub name: Option<String>,
    pub when: Matcher,
    pub respond: String,
    /// Verbatim 200 body instead of a chat completion (wire-error tests).
    pub raw_body: Option<String>,
    pub variants: Option<Variants>,
    pub fail: Option<FailureSpec>,
    pub delay_ms: u64,
}

impl Default for Rule {
    fn default() -> Self {
        Rule {
            name: None,
            when: Matcher::default(),
            respond: "{class}".into(),
            raw_body: None,
            variants: None,
            fail: None,
            delay_ms: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMode {
    /// Hash-seeded Gaussian direction, normalized.
    #[default]
    Gaussian,
    /// One-hot vector. A trailing `#n` in the text selects index `n mod dims`,
    /// otherwise a hash of the text does.
    OneHot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingRule {
    pub mode: EmbeddingMode,
    pub dims: usize,
    pub seed: u64,
    pub fail: Option<FailureSpec>,
}

impl Default for EmbeddingRule {
    fn default() -> Self {
        EmbeddingRule { mode: EmbeddingMode::Gaussian, dims: 64, seed: 0, fail: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockScript {
    pub rules: Vec<Rule>,
    /// Fallback when no rule matches; its matcher is ignored.
    pub default: Rule,
    pub embedding: EmbeddingRule,
    /// Ordered classes used for `{wrong_class}`.
    pub label_space: Vec<String>,
    /// Overrides the builtin catalog's rejection clauses.
    pub rejection_clauses: Option<Vec<String>>,
    /// Highest sample index recovered from request seeds.
    pub max_sample_index: Option<u32>,
}

impl MockScript {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: MockScript = serde_json::from_str(text).map_err(|e| MockError::Script(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| MockError::Io { path: path.to_path_buf(), source })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding.dims == 0 {
            return Err(MockError::Script("embedding dims must be positive".into()));
        }
        for r in self.rules.iter().chain([&self.default]) {
            if let Some(b) = r.when.bucket {
                if b.modulus == 0 || b.remainder >= b.modulus {
                    return Err(MockError::Script(format!("bad bucket {b:?}")));
                }
            }
            if r.variants == Some(Variants::Fixed(0)) {
                return Err(MockError::Script("variants must be positive".into()));
            }
        }
        Ok(())
    }

    /// Script answering `{class}` for everything.
    pub fn echo_class(template: &str) -> Self {
        MockScript { default: Rule { respond: template.into(), ..Rule::default() }, ..Default::default() }
    }

    /// Script that always knows the answer: anomalies are rejected whenever
    /// the prompt allows it, everything else gets its true class. Answers
    /// carry both common key lines so every catalog parses them.
    pub fn oracle() -> Self {
        let reject = Rule {
            name: Some("reject-anomalies".into()),
            when: Matcher { truth: Some(TruthMatch::Anomaly), rejection: Some(true), ..Matcher::default() },
            respond: "Answer: unknown\nLabel: unknown".into(),
            ..Rule::default()
        };
        MockScript { rules: vec![reject], ..Self::echo_class("Answer: {class}\nLabel: {class}") }
    }
}

/// What the mock knows about an attached image.
#[derive(Clone, Debug, PartialEq)]
pub struct KnownImage {
    pub id: String,
    pub truth: TruthRole,
    pub class: Option<String>,
    pub severity: u8,
    pub kind: Option<CorruptionKind>,
    pub ambiguity_bin: Option<u8>,
}

struct Request<'a> {
    image: Option<&'a KnownImage>,
    text: String,
    rejection: bool,
}

impl Matcher {
    fn accepts(&self, r: &Request<'_>) -> bool {
        let img = r.image;
        if let Some(id) = &self.image_id {
            if !img.is_some_and(|i| &i.id == id) {
                return false;
            }
        }
        if let Some(t) = self.truth {
            let want = match t {
                TruthMatch::Anomaly => TruthRole::Anomaly,
                TruthMatch::InLabelSpace => TruthRole::InLabelSpace,
            };
            if !img.is_some_and(|i| i.truth == want) {
                return false;
            }
        }
        if let Some(c) = &self.class {
            if !img.is_some_and(|i| i.class.as_ref() == Some(c)) {
                return false;
            }
        }
        if let Some(s) = self.min_severity {
            if !img.is_some_and(|i| i.severity >= s) {
                return false;
            }
        }
        if let Some(s) = self.max_severity {
            if !img.is_some_and(|i| i.severity <= s) {
                return false;
            }
        }
        if let Some(k) = self.kind {
            if !img.is_some_and(|i| i.kind == Some(k)) {
                return false;
            }
        }
        if let Some(b) = self.ambiguity_bin {
            if !img.is_some_and(|i| i.ambiguity_bin == Some(b)) {
                return false;
            }
        }
        if let Some(s) = &self.prompt_contains {
            if !r.text.contains(s.as_str()) {
                return false;
            }
        }
        if let Some(s) = &self.prompt_lacks {
            if r.text.contains(s.as_str()) {
                return false;
            }
        }
        if let Some(want) = self.rejection {
            if r.rejection != want {
                return false;
            }
        }
        if let Some(b) = self.bucket {
            let Some(i) = img else { return false };
            if derive(0, &["bucket", &i.id]) % b.modulus != b.remainder {
                return false;
            }
        }
        true
    }
}

#[derive(Default)]
struct Counters {
    requests: AtomicU64,
    chat: AtomicU64,
    embeddings: AtomicU64,
    injected_failures: AtomicU64,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
}

/// Request accounting as seen by the server.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockStats {
    pub requests: u64,
    pub chat_requests: u64,
    pub embedding_requests: u64,
    pub injected_failures: u64,
    pub max_in_flight: usize,
}

struct MockState {
    script: MockScript,
    images: HashMap<String, KnownImage>,
    clauses: Vec<String>,
    counters: Counters,
    failures: Mutex<HashMap<(usize, String), u32>>,
}

const DEFAULT_MAX_SAMPLE_INDEX: u32 = 256;

impl MockState {
    fn new(script: MockScript, manifests: &[Manifest]) -> Self {
        let mut images = HashMap::new();
        for m in manifests {
            for e in &m.entries {
                images.entry(e.sha256.clone()).or_insert_with(|| KnownImage {
                    id: e.id.clone(),
                    truth: e.truth,
                    class: e.class.clone(),
                    severity: e.severity,
                    kind: e.kind,
                    ambiguity_bin: e.ambiguity_bin,
                });
            }
        }
        let clauses = script.rejection_clauses.clone().unwrap_or_else(|| PromptCatalog::builtin().rejection_clauses());
        MockState { script, images, clauses, counters: Counters::default(), failures: Mutex::new(HashMap::new()) }
    }

    /// Returns the failure to inject, if the (rule, request) pair still has
    /// failing attempts left.
    fn take_failure(&self, rule: usize, spec: &FailureSpec, request_hash: &str) -> bool {
        let mut map = self.failures.lock().expect("failure map poisoned");
        let n = map.entry((rule, request_hash.to_string())).or_insert(0);
        if *n < spec.times {
            *n += 1;
            self.counters.injected_failures.fetch_add(1, Ordering::SeqCst);
            true
        } else {
            false
        }
    }

    fn stats(&self) -> MockStats {
        let c = &self.counters;
        MockStats {
            requests: c.requests.load(Ordering::SeqCst),
            chat_requests: c.chat.load(Ordering::SeqCst),
            embedding_requests: c.embeddings.load(Ordering::SeqCst),
            injected_failures: c.injected_failures.load(Ordering::SeqCst),
            max_in_flight: c.max_in_flight.load(Ordering::SeqCst),
        }
    }
}

struct Tracked<'a>(&'a Counters);

impl<'a> Tracked<'a> {
    fn enter(c: &'a Counters) -> Self {
        c.requests.fetch_add(1, Ordering::SeqCst);
        let now = c.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        c.max_in_flight.fetch_max(now, Ordering::SeqCst);
        Tracked(c)
    }
}

impl Drop for Tracked<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

fn error_response(status: u16, message: &str) -> Response {
    let code = StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (code, Json(json!({ "error": { "message": message, "type": "mock_injected" } }))).into_response()
}

async fn inject(state: &MockState, rule: usize, spec: &Option<FailureSpec>, hash: &str) -> Option<Response> {
    let spec = spec.as_ref()?;
    if !state.take_failure(rule, spec, hash) {
        return None;
    }
    match spec.hang_ms {
        Some(ms) => {
            tokio::time::sleep(Duration::from_millis(ms)).await;
            Some(error_response(504, "injected stall"))
        }
        None => Some(error_response(spec.status, "injected failure")),
    }
}

fn collect_text_and_images(body: &Value) -> (String, Vec<Vec<u8>>) {
    let mut texts = Vec::new();
    let mut images = Vec::new();
    for m in body.get("messages").and_then(Value::as_array).into_iter().flatten() {
        match m.get("content") {
            Some(Value::String(s)) => texts.push(s.clone()),
            Some(Value::Array(parts)) => {
                for p in parts {
                    if let Some(t) = p.get("text").and_then(Value::as_str) {
                        texts.push(t.to_string());
                    }
                    let url = p.pointer("/image_url/url").and_then(Value::as_str).unwrap_or_default();
                    if let Some((_, data)) = url.split_once(";base64,") {
                        if let Ok(bytes) = base64::engine::general_purpose::STANDARD.decode(data) {
                            images.push(bytes);
                        }
                    }
                }
            }
            _ => {}
        }
    }
    (texts.join("\n"), images)
}

fn render(template: &str, img: Option<&KnownImage>, sample_index: u32, variant: u32, labels: &[String]) -> String {
    let class = img.and_then(|i| i.class.clone()).unwrap_or_else(|| "none".into());
    let wrong = match labels.iter().position(|l| *l == class) {
        Some(p) if labels.len() > 1 => labels[(p + 1) % labels.len()].clone(),
        _ => labels.first().filter(|l| **l != class).cloned().unwrap_or_else(|| "wrong".into()),
    };
    template
        .replace("{class}", &class)
        .replace("{wrong_class}", &wrong)
        .replace("{id}", img.map(|i| i.id.as_str()).unwrap_or("unrecognized"))
        .replace("{severity}", &img.map(|i| i.severity).unwrap_or(0).to_string())
        .replace("{sample_index}", &sample_index.to_string())
        .replace("{variant}", &variant.to_string())
}

fn word_count(s: &str) -> u64 {
    s.split_whitespace().count() as u64
}

async fn chat(State(state): State<Arc<MockState>>, Json(body): Json<Value>) -> Response {
    let _t = Tracked::enter(&state.counters);
    state.counters.chat.fetch_add(1, Ordering::SeqCst);
    let hash = sha256_hex(body.to_string().as_bytes());
    let (text, images) = collect_text_and_images(&body);
    let image = images.first().and_then(|b| state.images.get(&sha256_hex(b)));
    let max_idx = state.script.max_sample_index.unwrap_or(DEFAULT_MAX_SAMPLE_INDEX);
    let sample_index = match (body.get("seed").and_then(Value::as_u64), image) {
        (Some(seed), Some(img)) => (0..max_idx).find(|i| sample_seed(&img.id, *i) == seed).unwrap_or(0),
        _ => 0,
    };
    let rejection = state.clauses.iter().any(|c| text.contains(c.as_str()));
    let req = Request { image, text, rejection };

    let (idx, rule) = state
        .script
        .rules
        .iter()
        .enumerate()
        .find(|(_, r)| r.when.accepts(&req))
        .unwrap_or((usize::MAX, &state.script.default));

    if rule.delay_ms > 0 {
        tokio::time::sleep(Duration::from_millis(rule.delay_ms)).await;
    }
    if let Some(resp) = inject(&state, idx, &rule.fail, &hash).await {
        return resp;
    }
    if let Some(raw) = &rule.raw_body {
        return (StatusCode::OK, raw.clone()).into_response();
    }
    let variant = match rule.variants {
        None => 0,
        Some(Variants::Fixed(n)) => sample_index % n,
        Some(Variants::SeverityPlusOne) => sample_index % (image.map(|i| i.severity as u32).unwrap_or(0) + 1),
    };
    let content = render(&rule.respond, image, sample_index, variant, &state.script.label_space);
    let model = body.get("model").cloned().unwrap_or(Value::Null);
    let (pt, ct) = (word_count(&req.text), word_count(&content));
    Json(json!({
        "id": format!("mock-{}", &hash[..16]),
        "object": "chat.completion",
        "created": 0,
        "model": model,
        "choices": [{
            "index": 0,
            "message": { "role": "assistant", "content": content },
            "finish_reason": "stop"
        }],
        "usage": { "prompt_tokens": pt, "completion_tokens": ct, "total_tokens": pt + ct }
    }))
    .into_response()
}

/// Deterministic pseudo-embedding for `text` under `rule`.
pub fn mock_embedding(rule: &EmbeddingRule, text: &str) -> Vec<f64> {
    let dims = rule.dims.max(1);
    match rule.mode {
        EmbeddingMode::Gaussian => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive(rule.seed, &["embed", text]));
            let v: Vec<f64> = (0..dims).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        }
        EmbeddingMode::OneHot => {
            let marker = text
                .rsplit_once('#')
                .and_then(|(_, tail)| tail.trim().parse::<u64>().ok());
            let idx = marker.unwrap_or_else(|| derive(rule.seed, &["onehot", text])) as usize % dims;
            let mut v = vec![0.0; dims];
            v[idx] = 1.0;
            v
        }
    }
}

async fn embeddings(State(state): State<Arc<MockState>>, Json(body): Json<Value>) -> Response {
    let _t = Tracked::enter(&state.counters);
    state.counters.embeddings.fetch_add(1, Ordering::SeqCst);
    let hash = sha256_hex(body.to_string().as_bytes());
    if let Some(resp) = inject(&state, usize::MAX - 1, &state.script.embedding.fail, &hash).await {
        return resp;
    }
    let inputs: Vec<String> = match body.get("input") {
        Some(Value::String(s)) => vec![s.clone()],
        Some(Value::Array(a)) => a.iter().map(|v| v.as_str().unwrap_or_default().to_string()).collect(),
        _ => return error_response(400, "missing input"),
    };
    let data: Vec<Value> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| json!({ "object": "embedding", "index": i, "embedding": mock_embedding(&state.script.embedding, t) }))
        .collect();
    let tokens: u64 = inputs.iter().map(|t| word_count(t)).sum();
    Json(json!({
        "object": "list",
        "data": data,
        "model": body.get("model").cloned().unwrap_or(Value::Null),
        "usage": { "prompt_tokens": tokens, "total_tokens": tokens }
    }))
    .into_response()
}

async fn stats(State(state): State<Arc<MockState>>) -> Json<MockStats> {
    Json(state.stats())
}

/// A running mock. Dropping the handle does not stop the server; call
/// [`MockHandle::shutdown`].
pub struct MockHandle {
    pub addr: SocketAddr,
    state: Arc<MockState>,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    task: tokio::task::JoinHandle<()>,
}

impl MockHandle {
    /// Base URL including `/v1`, ready for the client's endpoint config.
    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    pub fn stats(&self) -> MockStats {
        self.state.stats()
    }

    /// Number of HTTP requests served so far.
    pub fn request_count(&self) -> u64 {
        self.state.counters.requests.load(Ordering::SeqCst)
    }

    pub async fn shutdown(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        let _ = self.task.await;
    }

    /// Resolves when the server stops (e.g. on ctrl-c in standalone mode).
    pub async fn wait(self) {
        let _ = self.task.await;
    }
}

/// Starts the mock on `bind_addr` (use port 0 for an ephemeral port).
pub async fn serve(script: MockScript, manifests: &[Manifest], bind_addr: &str) -> Result<MockHandle> {
    script.validate()?;
    let state = Arc::new(MockState::new(script, manifests));
    let app = Router::new()
        .route("/v1/chat/completions", post(chat))
        .route("/v1/embeddings", post(embeddings))
        .route("/v1/mock/stats", get(stats))
        .with_state(state.clone());
    let listener = tokio::net::TcpListener::bind(bind_addr)
        .await
        .map_err(|source| MockError::Bind { addr: bind_addr.to_string(), source })?;
    let addr = listener.local_addr().map_err(|source| MockError::Bind { addr: bind_addr.to_string(), source })?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let task = tokio::spawn(async move {
        let _ = axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await;
    });
    tracing::info!(%addr, "mock server listening");
    Ok(MockHandle { addr, state, shutdown: Some(tx), task })
}
