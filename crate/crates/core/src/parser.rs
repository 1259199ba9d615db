//! Answer extraction from raw model text.
//!
//! The contract line (`Answer: ...` / `Label: ...`) is authoritative and the
//! last one wins, so labels mentioned during reasoning do not leak into the
//! result. Without a contract line the parser accepts a single unambiguous
//! mention anywhere in the text. Everything else is [`Outcome::Malformed`].

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "label")]
pub enum Outcome {
    Label(String),
    Rejected,
    Malformed,
}

impl Outcome {
    pub fn label(&self) -> Option<&str> {
        match self {
            Outcome::Label(l) => Some(l),
            _ => None,
        }
    }

    pub fn is_rejected(&self) -> bool {
        matches!(self, Outcome::Rejected)
    }

    pub fn is_malformed(&self) -> bool {
        matches!(self, Outcome::Malformed)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedAnswer {
    pub outcome: Outcome,
    /// The contract line the outcome was read from, if any.
    pub matched_line: Option<String>,
    /// Names of the rules that fired, in order.
    pub normalization_trace: Vec<String>,
    /// Raw text, kept only for malformed outcomes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
}

/// Parser knobs. The default is strict: no synonym folding.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParserOptions {
    #[serde(default)]
    pub use_synonyms: bool,
    /// Overrides [`default_synonyms`] when non-empty.
    #[serde(default)]
    pub synonyms: BTreeMap<String, String>,
}

/// Common informal names for the built-in label sets.
pub fn default_synonyms() -> BTreeMap<String, String> {
    [
        ("plane", "airplane"),
        ("aeroplane", "airplane"),
        ("jet", "airplane"),
        ("car", "automobile"),
        ("auto", "automobile"),
        ("boat", "ship"),
        ("kitten", "cat"),
        ("puppy", "dog"),
        ("toad", "frog"),
        ("lorry", "truck"),
        ("pony", "horse"),
        ("not sure", "unknown"),
        ("uncertain", "unknown"),
    ]
    .into_iter()
    .map(|(a, b)| (a.to_string(), b.to_string()))
    .collect()
}

const MARKUP: &[char] = &['*', '`', '#', '>', '~'];

/// Lowercases and reduces text to space-separated alphanumeric words.
/// Underscores, hyphens and spaces are interchangeable afterwards.
pub fn normalize(s: &str) -> String {
    normalize_traced(s, &mut Vec::new())
}

fn normalize_traced(s: &str, trace: &mut Vec<String>) -> String {
    let lower = s.to_lowercase();
    if lower != s {
        trace.push("lowercase".into());
    }
    let mut out = String::with_capacity(lower.len());
    let mut stripped = false;
    for c in lower.chars() {
        if c.is_alphanumeric() {
            out.push(c);
        } else {
            if !c.is_whitespace() {
                stripped = true;
            }
            if !out.ends_with(' ') && !out.is_empty() {
                out.push(' ');
            }
        }
    }
    if out.ends_with(' ') {
        out.pop();
    }
    if stripped {
        trace.push("strip_punctuation".into());
    }
    out
}

fn strip_markup(line: &str) -> String {
    line.chars().filter(|c| !MARKUP.contains(c)).collect::<String>()
}

/// If `line` is a contract line for `key`, returns its payload.
fn key_payload<'a>(line: &'a str, key: &str) -> Option<&'a str> {
    let stem = key.trim().trim_end_matches(':').trim();
    let wants_colon = key.trim().ends_with(':');
    let body = line.trim_start_matches(|c: char| c.is_whitespace() || c == '-' || c == '_');
    let head = body.get(..stem.len())?;
    if !head.eq_ignore_ascii_case(stem) {
        return None;
    }
    let rest = &body[stem.len()..];
    if rest.starts_with(|c: char| c.is_alphanumeric()) {
        return None;
    }
    let rest = rest.trim_start();
    if wants_colon {
        rest.strip_prefix(':').map(str::trim)
    } else {
        Some(rest.strip_prefix(':').unwrap_or(rest).trim())
    }
}

struct Candidates {
    /// (normalized form, outcome) pairs, rejection tokens first.
    entries: Vec<(String, Outcome)>,
}

impl Candidates {
    fn new(label_space: &[String], rejection_tokens: &[String], opts: &ParserOptions) -> Self {
        let mut entries: Vec<(String, Outcome)> = Vec::new();
        for t in rejection_tokens {
            let n = normalize(t);
            if !n.is_empty() {
                entries.push((n, Outcome::Rejected));
            }
        }
        for l in label_space {
            let n = normalize(l);
            if !n.is_empty() {
                entries.push((n, Outcome::Label(l.clone())));
            }
        }
        if opts.use_synonyms {
            let table = if opts.synonyms.is_empty() { default_synonyms() } else { opts.synonyms.clone() };
            for (alias, target) in table {
                let target_n = normalize(&target);
                let resolved = entries.iter().find(|(n, _)| *n == target_n).map(|(_, o)| o.clone());
                if let Some(o) = resolved {
                    entries.push((normalize(&alias), o));
                }
            }
        }
        Candidates { entries }
    }

    fn exact(&self, payload: &str) -> Option<Outcome> {
        self.entries.iter().find(|(n, _)| n == payload).map(|(_, o)| o.clone())
    }

    /// The single outcome whose phrase occurs on word boundaries, if unique.
    /// Longer phrases shadow shorter ones they contain.
    fn unique_mention(&self, text: &str) -> Option<Outcome> {
        let padded = format!(" {text} ");
        let mut hits: Vec<(&str, &Outcome)> = self
            .entries
            .iter()
            .filter(|(n, _)| padded.contains(&format!(" {n} ")))
            .map(|(n, o)| (n.as_str(), o))
            .collect();
        let snapshot = hits.clone();
        hits.retain(|(n, _)| {
            !snapshot.iter().any(|(m, _)| m.len() > n.len() && format!(" {m} ").contains(&format!(" {n} ")))
        });
        let first = hits.first()?.1;
        hits.iter().all(|(_, o)| *o == first).then(|| first.clone())
    }
}

/// Parses with the default (strict) options.
pub fn parse_answer(raw: &str, answer_key: &str, label_space: &[String], rejection_tokens: &[String]) -> ParsedAnswer {
    parse_answer_with(raw, answer_key, label_space, rejection_tokens, &ParserOptions::default())
}

pub fn parse_answer_with(
    raw: &str,
    answer_key: &str,
    label_space: &[String],
    rejection_tokens: &[String],
    opts: &ParserOptions,
) -> ParsedAnswer {
    let cands = Candidates::new(label_space, rejection_tokens, opts);
    let mut trace = Vec::new();
    if opts.use_synonyms {
        trace.push("synonyms_enabled".into());
    }
    let lines: Vec<String> = raw.lines().map(strip_markup).collect();

    let key_line = lines
        .iter()
        .enumerate()
        .rev()
        .find_map(|(i, l)| key_payload(l, answer_key).map(|p| (i, p.to_string())));

    let (outcome, matched_line) = match key_line {
        Some((i, mut payload)) => {
            trace.push("key_line".into());
            if normalize(&payload).is_empty() {
                if let Some(next) = lines[i + 1..].iter().find(|l| !normalize(l).is_empty()) {
                    trace.push("payload_next_line".into());
                    payload = next.trim().to_string();
                }
            }
            let norm = normalize_traced(&payload, &mut trace);
            let outcome = match cands.exact(&norm) {
                Some(o) => {
                    trace.push("exact_match".into());
                    Some(o)
                }
                None => cands.unique_mention(&norm).inspect(|_| trace.push("payload_mention".into())),
            };
            (outcome, Some(lines[i].trim().to_string()))
        }
        None => {
            trace.push("no_key_line".into());
            let norm = normalize_traced(raw, &mut trace);
            let outcome = cands.unique_mention(&norm).inspect(|_| trace.push("text_mention".into()));
            (outcome, None)
        }
    };

    match outcome {
        Some(outcome) => ParsedAnswer { outcome, matched_line, normalization_trace: trace, raw: None },
        None => {
            trace.push("malformed".into());
            ParsedAnswer {
                outcome: Outcome::Malformed,
                matched_line,
                normalization_trace: trace,
                raw: Some(raw.to_string()),
            }
        }
    }
}

const CAPTION_PREFIXES: &[&str] = &["caption:", "description:", "image description:"];

/// Strips boilerplate around a caption. `None` means the output is malformed
/// (nothing left to embed).
pub fn parse_caption(raw: &str) -> Option<String> {
    let mut s = raw.trim();
    loop {
        let before = s;
        let unbold = s.trim_matches('*').trim();
        if let Some(p) = CAPTION_PREFIXES
            .iter()
            .find(|p| unbold.get(..p.len()).is_some_and(|h| h.eq_ignore_ascii_case(p)))
        {
            s = unbold[p.len()..].trim_start_matches('*').trim();
        }
        for (open, close) in [('"', '"'), ('\'', '\''), ('\u{201c}', '\u{201d}')] {
            if s.len() >= 2 && s.starts_with(open) && s.ends_with(close) {
                let inner = &s[open.len_utf8()..s.len() - close.len_utf8()];
                if !inner.contains(open) && !inner.contains(close) {
                    s = inner.trim();
                }
            }
        }
        if s == before {
            break;
        }
    }
    (!s.is_empty()).then(|| s.to_string())
}
