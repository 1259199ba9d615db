//! Black-box evaluation harness for implicit uncertainty quantification in
//! vision-language models.
//!
//! The crate covers the whole pipeline:
//!
//! - [`corpus`]: builds the evaluation image sets (corrupted natural images,
//!   synthetic non-ECG line plots, class-mapped anomaly splits, Galaxy Zoo
//!   ambiguity bins) and writes a JSON-lines manifest.
//! - [`prompts`]: the versioned prompt catalog and its rendering into chat
//!   messages.
//! - [`client`]: an OpenAI-compatible chat/embeddings client with an on-disk
//!   response cache, bounded concurrency, retries and a budget guard.
//! - [`parser`]: turns raw model text into a label, a rejection, or a
//!   malformed outcome.
//! - [`metrics`]: anomaly precision/recall/F1, selective accuracy and
//!   rejection rate, caption diversity.
//! - [`runner`]: resumable experiment orchestration over manifest x prompt
//!   variant x model.
//! - [`mockserver`]: a scripted, deterministic OpenAI-compatible stub for
//!   hermetic tests.
//! - [`report`]: CSV/JSON tables and static SVG line charts.

pub mod client;
pub mod corpus;
mod fsutil;
pub mod metrics;
pub mod mockserver;
pub mod parser;
pub mod prompts;
pub mod report;
pub mod runner;
pub mod seed;

pub use client::{DecodeMode, DecodeParams, EmbeddingVector, QueryRecord, VlmClient};
pub use corpus::{ImageSample, Manifest, ManifestEntry, Task, Truth};
pub use metrics::{AnomalyReport, DiversityScore, SelectiveReport};
pub use parser::{Outcome, ParsedAnswer};
pub use prompts::{CatalogId, PromptCatalog, RenderedPrompt, Strategy};
pub use runner::{RunConfig, RunOptions, RunOutcome};
