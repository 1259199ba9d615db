//! Resumable experiment orchestration.
//!
//! A run directory holds:
//!
//! | file | contents |
//! |------|----------|
//! | `run.json` | config digest, catalog fingerprint, planned task count |
//! | `records.jsonl` | one [`QueryRecord`] per completed query, append-only |
//! | `failures.jsonl` | queries that failed after retries (not persisted as records) |
//! | `diversity.jsonl` | one [`DiversityLine`] per (model, sample), rewritten per run |
//! | `reports/` | `report.json`, CSV tables, SVG charts |
//!
//! Queries run on a bounded worker pool; a single writer appends finished
//! records, so each cache key lands in the log exactly once. Resuming skips
//! keys already in the log and refuses to continue if the config changed.

use crate::client::{
    run_budget_guard, BudgetDecision, ClientConfig, ClientError, ClientStats, DecodeParams, QueryRecord, VlmClient,
};
use crate::corpus::{CorpusError, Manifest, ManifestEntry};
use crate::metrics::{caption_diversity, DiversityScore, MetricsError};
use crate::prompts::{CatalogId, ImageRef, MessageLayout, PromptCatalog, PromptError, RenderedPrompt, Strategy};
use crate::report::{build_report, write_report, DiversityLine, EvalReport, Provenance, ReportError};
use crate::seed::sha256_hex;
use futures::StreamExt;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

pub const RUN_STATE_FILE: &str = "run.json";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const FAILURES_FILE: &str = "failures.jsonl";
pub const DIVERSITY_FILE: &str = "diversity.jsonl";
pub const REPORT_DIR: &str = "reports";

#[derive(Debug, thiserror::Error)]
pub enum RunnerError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("budget guard refused the run: {0}")]
    BudgetRefused(String),
    #[error("run directory {dir} was created with config digest {found}, current config is {expected}")]
    DigestMismatch { dir: PathBuf, expected: String, found: String },
    #[error("run directory {0} already has records; pass resume to continue it")]
    RunExists(PathBuf),
    #[error("aborted: {failures} of {planned} queries failed")]
    Aborted { failures: usize, planned: usize },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt log {path}: {message}")]
    CorruptLog { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, RunnerError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunnerError + '_ {
    move |source| RunnerError::Io { path: path.to_path_buf(), source }
}

/// One classification prompt variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub catalog: CatalogId,
    #[serde(default)]
    pub strategy: Option<Strategy>,
    #[serde(default = "yes")]
    pub rejection: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionRun {
    pub catalog: CatalogId,
    #[serde(default = "default_k")]
    pub k: u32,
    pub embedding_model: String,
    #[serde(default = "default_sampling")]
    pub decode: DecodeParams,
}

fn default_k() -> u32 {
    20
}

fn default_sampling() -> DecodeParams {
    DecodeParams::sampling(default_k())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Manifest file or directory; relative paths resolve against the config
    /// file's directory when loaded from disk.
    pub manifest: PathBuf,
    pub output_dir: PathBuf,
    pub models: Vec<String>,
    #[serde(default)]
    pub variants: Vec<VariantSpec>,
    #[serde(default)]
    pub decode: DecodeParams,
    #[serde(default)]
    pub captions: Option<CaptionRun>,
    #[serde(default)]
    pub client: ClientConfig,
    /// Template directory replacing the builtin catalog.
    #[serde(default)]
    pub prompt_dir: Option<PathBuf>,
    #[serde(default)]
    pub layout: MessageLayout,
    /// Abort when more than this fraction of planned queries fail.
    #[serde(default = "default_abort")]
    pub abort_failure_fraction: f64,
}

fn default_abort() -> f64 {
    0.05
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| RunnerError::Config(e.to_string()))
    }

    /// Loads a TOML config and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.manifest);
        resolve(&mut cfg.output_dir);
        if let Some(d) = cfg.client.cache_dir.as_mut() {
            resolve(d);
        }
        if let Some(d) = cfg.prompt_dir.as_mut() {
            resolve(d);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(RunnerError::Config("no models configured".into()));
        }
        if self.variants.is_empty() && self.captions.is_none() {
            return Err(RunnerError::Config("nothing to run: no variants and no caption run".into()));
        }
        for v in &self.variants {
            if v.catalog.is_caption() {
                return Err(RunnerError::Config(format!("{} is a caption catalog; use [captions]", v.catalog)));
            }
        }
        if let Some(c) = &self.captions {
            if !c.catalog.is_caption() {
                return Err(RunnerError::Config(format!("{} is not a caption catalog", c.catalog)));
            }
            if c.k < 2 {
                return Err(RunnerError::Config(format!("caption diversity needs k >= 2, got {}", c.k)));
            }
        }
        if !(0.0..=1.0).contains(&self.abort_failure_fraction) {
            return Err(RunnerError::Config("abort_failure_fraction must be within [0, 1]".into()));
        }
        Ok(())
    }

    /// Digest of everything that changes what the records mean. Runtime
    /// knobs (endpoint URL, concurrency, cache location, budget, retries) are
    /// excluded so they can change between resumes.
    pub fn digest(&self, manifest: &Manifest) -> String {
        let manifest_lines: Vec<(&str, &str)> = manifest.entries.iter().map(|e| (e.id.as_str(), e.sha256.as_str())).collect();
        let captions = self.captions.as_ref().map(|c| {
            let mut c = c.clone();
            c.decode.n_samples = c.k;
            c
        });
        let canonical = serde_json::json!({
            "manifest": manifest_lines,
            "models": self.models,
            "variants": self.variants,
            "decode": self.decode,
            "captions": captions,
            "parser": self.client.parser,
            "layout": self.layout,
        });
        sha256_hex(canonical.to_string().as_bytes())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub config_digest: String,
    pub catalog_fingerprint: String,
    pub planned_queries: usize,
    pub completed_keys: usize,
}

/// Options that do not affect results.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub resume: bool,
    /// Stop after this many new records (simulates an interrupted run).
    pub stop_after: Option<usize>,
    /// Skip the budget guard (used when the endpoint is known to be local).
    pub skip_budget_guard: bool,
    pub plots: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunOutcome {
    pub planned: usize,
    pub skipped: usize,
    pub written: usize,
    pub failures: usize,
    pub stopped_early: bool,
    pub client: ClientStats,
    pub report: Option<EvalReport>,
}

#[derive(Clone)]
struct Job {
    key: String,
    model: String,
    prompt: RenderedPrompt,
    decode: DecodeParams,
    sample_index: u32,
}

#[derive(Serialize, Deserialize)]
struct FailureLine {
    cache_key: String,
    sample_id: String,
    model_id: String,
    sample_index: u32,
    error: String,
}

fn catalog_for(cfg: &RunConfig) -> Result<PromptCatalog> {
    Ok(match &cfg.prompt_dir {
        Some(d) => PromptCatalog::load_dir(d)?,
        None => PromptCatalog::builtin(),
    })
}

fn image_ref(m: &Manifest, e: &ManifestEntry) -> ImageRef {
    ImageRef { sample_id: e.id.clone(), path: m.image_path(e) }
}

fn plan(cfg: &RunConfig, manifest: &Manifest, catalog: &PromptCatalog, client: &VlmClient) -> Result<Vec<Job>> {
    let mut jobs = Vec::new();
    let mut seen = HashSet::new();
    let mut push = |job: Job, jobs: &mut Vec<Job>| {
        if seen.insert(job.key.clone()) {
            jobs.push(job);
        }
    };
    for model in &cfg.models {
        for v in &cfg.variants {
            for e in &manifest.entries {
                let prompt = catalog.render(v.catalog, v.strategy, v.rejection, image_ref(manifest, e), cfg.layout)?;
                let key = client.key_for(model, &prompt, &cfg.decode, 0)?;
                push(Job { key, model: model.clone(), prompt, decode: cfg.decode.clone(), sample_index: 0 }, &mut jobs);
            }
        }
        if let Some(c) = &cfg.captions {
            let mut decode = c.decode.clone();
            decode.n_samples = c.k;
            for e in &manifest.entries {
                let prompt = catalog.render(c.catalog, None, false, image_ref(manifest, e), cfg.layout)?;
                for i in 0..c.k {
                    let key = client.key_for(model, &prompt, &decode, i)?;
                    push(Job { key, model: model.clone(), prompt: prompt.clone(), decode: decode.clone(), sample_index: i }, &mut jobs);
                }
            }
        }
    }
    Ok(jobs)
}

/// Reads a JSON-lines log, cutting off a torn final line first.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(RunnerError::Io { path: path.to_path_buf(), source: e }),
    };
    let mut out = Vec::new();
    for (i, line) in bytes.split(|b| *b == b'\n').enumerate() {
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        match serde_json::from_slice(line) {
            Ok(v) => out.push(v),
            Err(e) => {
                return Err(RunnerError::CorruptLog { path: path.to_path_buf(), message: format!("line {}: {e}", i + 1) })
            }
        }
    }
    Ok(out)
}

/// Drops any bytes after the last newline (a record torn by a crash).
fn repair_tail(path: &Path) -> Result<()> {
    let Ok(bytes) = std::fs::read(path) else { return Ok(()) };
    if bytes.is_empty() || bytes.ends_with(b"\n") {
        return Ok(());
    }
    let keep = bytes.iter().rposition(|b| *b == b'\n').map(|i| i + 1).unwrap_or(0);
    tracing::warn!(path = %path.display(), dropped = bytes.len() - keep, "truncating torn final line");
    let f = std::fs::OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
    f.set_len(keep as u64).map_err(io_err(path))
}

fn append_line<T: Serialize>(file: &mut std::fs::File, path: &Path, value: &T) -> Result<()> {
    let mut line = serde_json::to_vec(value).expect("log lines serialize");
    line.push(b'\n');
    file.write_all(&line).map_err(io_err(path))?;
    file.flush().map_err(io_err(path))
}

fn open_append(path: &Path) -> Result<std::fs::File> {
    std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))
}

/// Runs every configured variant and caption job, then scores the run.
pub async fn run_experiment(cfg: &RunConfig, opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let manifest = Manifest::load(&cfg.manifest)?;
    let catalog = catalog_for(cfg)?;
    let fingerprint = catalog.fingerprint();
    let client = VlmClient::new(cfg.client.clone(), fingerprint.clone())?;
    let digest = cfg.digest(&manifest);
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;

    let state_path = dir.join(RUN_STATE_FILE);
    let records_path = dir.join(RECORDS_FILE);
    if let Ok(text) = std::fs::read_to_string(&state_path) {
        let prev: RunState =
            serde_json::from_str(&text).map_err(|e| RunnerError::CorruptLog { path: state_path.clone(), message: e.to_string() })?;
        if prev.config_digest != digest || prev.catalog_fingerprint != fingerprint {
            return Err(RunnerError::DigestMismatch {
                dir: dir.clone(),
                expected: digest,
                found: prev.config_digest,
            });
        }
    }
    let has_records = std::fs::metadata(&records_path).map(|m| m.len() > 0).unwrap_or(false);
    if has_records && !opts.resume {
        return Err(RunnerError::RunExists(dir.clone()));
    }
    repair_tail(&records_path)?;
    let existing: Vec<QueryRecord> = read_jsonl(&records_path)?;
    let done: HashSet<String> = existing.iter().map(|r| r.cache_key.clone()).collect();

    let jobs = plan(cfg, &manifest, &catalog, &client)?;
    let planned = jobs.len();
    let pending: Vec<Job> = jobs.into_iter().filter(|j| !done.contains(&j.key)).collect();
    let skipped = planned - pending.len();

    if !opts.skip_budget_guard {
        let embed_calls = match &cfg.captions {
            Some(_) => (cfg.models.len() * manifest.entries.len()) as u64,
            None => 0,
        };
        let projected_tokens = pending.iter().map(|j| j.decode.max_tokens as u64).sum::<u64>();
        if let BudgetDecision::Refuse(why) =
            run_budget_guard(pending.len() as u64 + embed_calls, Some(projected_tokens), &cfg.client)
        {
            return Err(RunnerError::BudgetRefused(why));
        }
    }

    let state = RunState {
        config_digest: digest.clone(),
        catalog_fingerprint: fingerprint.clone(),
        planned_queries: planned,
        completed_keys: done.len(),
    };
    crate::fsutil::write_atomic(&state_path, &serde_json::to_vec_pretty(&state).expect("state serializes"))
        .map_err(io_err(&state_path))?;

    let failures_path = dir.join(FAILURES_FILE);
    let mut records_file = open_append(&records_path)?;
    let mut failures_file = open_append(&failures_path)?;
    let limit = (cfg.abort_failure_fraction * planned as f64).floor() as usize;
    let concurrency = cfg.client.concurrency.max(1);
    let stop_after = opts.stop_after.unwrap_or(usize::MAX);

    let mut written = 0;
    let mut failures = 0;
    let mut stopped_early = false;
    let mut seen_keys = done;
    {
        let mut stream = futures::stream::iter(pending.into_iter().map(|job| {
            let client = client.clone();
            async move {
                let r = client.query(&job.model, &job.prompt, &job.decode, job.sample_index).await;
                (job, r)
            }
        }))
        .buffer_unordered(concurrency);

        while let Some((job, result)) = stream.next().await {
            match result {
                Ok(record) => {
                    debug_assert_eq!(record.cache_key, job.key);
                    if seen_keys.insert(record.cache_key.clone()) {
                        append_line(&mut records_file, &records_path, &record)?;
                        written += 1;
                    }
                }
                Err(e) => {
                    if matches!(e, ClientError::Auth { .. } | ClientError::BudgetExceeded(_) | ClientError::Image { .. }) {
                        return Err(e.into());
                    }
                    tracing::warn!(sample = %job.prompt.image().sample_id, "query failed: {e}");
                    failures += 1;
                    append_line(
                        &mut failures_file,
                        &failures_path,
                        &FailureLine {
                            cache_key: job.key.clone(),
                            sample_id: job.prompt.image().sample_id.clone(),
                            model_id: job.model.clone(),
                            sample_index: job.sample_index,
                            error: e.to_string(),
                        },
                    )?;
                    if failures > limit {
                        return Err(RunnerError::Aborted { failures, planned });
                    }
                }
            }
            if written >= stop_after {
                stopped_early = true;
                break;
            }
        }
    }

    let mut report = None;
    if !stopped_early {
        if let Some(c) = &cfg.captions {
            let records: Vec<QueryRecord> = read_jsonl(&records_path)?;
            let lines = compute_diversity(&client, &manifest, &records, c).await?;
            write_diversity(&dir.join(DIVERSITY_FILE), &lines)?;
        }
        report = Some(score_run(cfg, opts.plots)?);
    }

    Ok(RunOutcome { planned, skipped, written, failures, stopped_early, client: client.stats(), report })
}

/// Embeds each sample's captions and scores their diversity.
async fn compute_diversity(
    client: &VlmClient,
    manifest: &Manifest,
    records: &[QueryRecord],
    c: &CaptionRun,
) -> Result<Vec<DiversityLine>> {
    let mut captions: BTreeMap<(String, String), BTreeMap<u32, String>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.catalog_id == c.catalog && r.sample_index < c.k) {
        if let Some(text) = &r.caption {
            captions.entry((r.model_id.clone(), r.sample_id.clone())).or_default().insert(r.sample_index, text.clone());
        }
    }
    let mut lines = Vec::new();
    for ((model_id, sample_id), by_index) in captions {
        let Some(entry) = manifest.get(&sample_id) else { continue };
        let texts: Vec<String> = by_index.into_values().collect();
        if texts.len() < 2 {
            tracing::warn!(%sample_id, "fewer than two usable captions; skipping diversity");
            continue;
        }
        let vectors = client.embed(&c.embedding_model, &texts).await?;
        let score = caption_diversity(&vectors)?;
        lines.push(DiversityLine {
            model_id,
            score: DiversityScore { sample_id, k: texts.len(), score, embedding_model_id: c.embedding_model.clone() },
            severity: entry.severity,
            kind: entry.kind,
            ambiguity_bin: entry.ambiguity_bin,
        });
    }
    Ok(lines)
}

fn write_diversity(path: &Path, lines: &[DiversityLine]) -> Result<()> {
    let mut buf = Vec::new();
    for l in lines {
        buf.extend(serde_json::to_vec(l).expect("diversity lines serialize"));
        buf.push(b'\n');
    }
    crate::fsutil::write_atomic(path, &buf).map_err(io_err(path))
}

/// Recomputes the report from the logs in `cfg.output_dir` and writes it to
/// `reports/`. Byte-stable for unchanged logs.
pub fn score_run(cfg: &RunConfig, plots: bool) -> Result<EvalReport> {
    score_dir(&cfg.output_dir, &cfg.manifest, plots)
}

/// Like [`score_run`] but needs only the run directory and manifest.
pub fn score_dir(run_dir: &Path, manifest_path: &Path, plots: bool) -> Result<EvalReport> {
    let manifest = Manifest::load_unverified(manifest_path)?;
    let state_path = run_dir.join(RUN_STATE_FILE);
    let state: RunState = serde_json::from_slice(&std::fs::read(&state_path).map_err(io_err(&state_path))?)
        .map_err(|e| RunnerError::CorruptLog { path: state_path.clone(), message: e.to_string() })?;
    let records_path = run_dir.join(RECORDS_FILE);
    let mut records: Vec<QueryRecord> = read_jsonl(&records_path)?;
    let mut keys = HashSet::new();
    records.retain(|r| keys.insert(r.cache_key.clone()));
    records.sort_by(|a, b| a.cache_key.cmp(&b.cache_key));
    let diversity: Vec<DiversityLine> = read_jsonl(&run_dir.join(DIVERSITY_FILE))?;
    let report = build_report(
        &manifest,
        &records,
        &diversity,
        Provenance { config_digest: state.config_digest, catalog_fingerprint: state.catalog_fingerprint },
    )?;
    write_report(&run_dir.join(REPORT_DIR), &report, plots)?;
    Ok(report)
}

/// Classification variants only.
pub async fn run_classification(cfg: &RunConfig, opts: &RunOptions) -> Result<RunOutcome> {
    let mut c = cfg.clone();
    c.captions = None;
    run_experiment(&c, opts).await
}

/// Classification variants on an anomaly-task manifest.
pub async fn run_anomaly(cfg: &RunConfig, opts: &RunOptions) -> Result<RunOutcome> {
    let m = Manifest::load_unverified(&cfg.manifest)?;
    if !m.meta.task.is_anomaly_task() {
        return Err(RunnerError::Config(format!("{} is not an anomaly task", m.meta.task)));
    }
    run_classification(cfg, opts).await
}

/// Caption sampling and diversity scoring only.
pub async fn run_caption_diversity(cfg: &RunConfig, opts: &RunOptions) -> Result<RunOutcome> {
    if cfg.captions.is_none() {
        return Err(RunnerError::Config("no [captions] section".into()));
    }
    let mut c = cfg.clone();
    c.variants.clear();
    run_experiment(&c, opts).await
}

/// Number of lines in a log file (for progress reporting).
pub fn count_lines(path: &Path) -> usize {
    std::fs::File::open(path)
        .map(|f| std::io::BufReader::new(f).lines().count())
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_from_toml() {
        let cfg = RunConfig::from_toml(
            r#"
            manifest = "corpus"
            output_dir = "runs/a"
            models = ["m1"]

            [[variants]]
            catalog = "imagenetc_classify"
            strategy = "simple"

            [[variants]]
            catalog = "imagenetc_classify"
            rejection = false

            [captions]
            catalog = "caption_imagenet"
            embedding_model = "all-mpnet-base-v2"

            [client]
            concurrency = 4
            [client.budget]
            max_calls = 100
            "#,
        )
        .unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.variants.len(), 2);
        assert!(cfg.variants[0].rejection && !cfg.variants[1].rejection);
        let c = cfg.captions.as_ref().unwrap();
        assert_eq!(c.k, 20);
        assert_eq!(c.decode.temperature, 0.6);
        assert_eq!(cfg.client.budget.max_calls, 100);
        assert_eq!(cfg.abort_failure_fraction, 0.05);
    }

    #[test]
    fn config_validation() {
        let base = r#"manifest = "m"
output_dir = "o"
models = ["x"]
"#;
        assert!(RunConfig::from_toml(base).unwrap().validate().is_err());
        let caption_variant = format!("{base}[[variants]]\ncatalog = \"caption_galaxy\"\n");
        assert!(RunConfig::from_toml(&caption_variant).unwrap().validate().is_err());
        let small_k = format!("{base}[captions]\ncatalog = \"caption_galaxy\"\nk = 1\nembedding_model = \"e\"\n");
        assert!(RunConfig::from_toml(&small_k).unwrap().validate().is_err());
    }

    #[test]
    fn torn_tail_is_trimmed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        std::fs::write(&p, b"{\"a\":1}\n{\"a\":2}\n{\"a\":").unwrap();
        repair_tail(&p).unwrap();
        let v: Vec<serde_json::Value> = read_jsonl(&p).unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(count_lines(&p), 2);
    }
}
