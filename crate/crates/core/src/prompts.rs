//! Prompt catalog.
//!
//! Templates are plain-text files: a `key: value` front matter block, a
//! `---` separator, then the body. The rejection clause is delimited inline
//! by `[[reject]]` and `[[/reject]]`; rendering with rejection disabled drops
//! exactly that span and nothing else.
//!
//! ```text
//! catalog_id: imagenetc_classify
//! strategy: simple
//! answer_key: Label:
//! label_space: airplane, automobile, ...
//! ---
//! You are given an image, ...
//! Label: class_name[[reject]]
//!
//! Notice that if you find an image very ambiguous ...[[/reject]]
//! ```

use crate::seed::sha256_hex;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

const REJECT_OPEN: &str = "[[reject]]";
const REJECT_CLOSE: &str = "[[/reject]]";

const BUILTIN: &[(&str, &str)] = &[
    ("caption_galaxy.txt", include_str!("../templates/caption_galaxy.txt")),
    ("caption_imagenet.txt", include_str!("../templates/caption_imagenet.txt")),
    ("cifar_anomaly.caption_answer.txt", include_str!("../templates/cifar_anomaly.caption_answer.txt")),
    ("cifar_anomaly.direct.txt", include_str!("../templates/cifar_anomaly.direct.txt")),
    ("cifar_anomaly.simple.txt", include_str!("../templates/cifar_anomaly.simple.txt")),
    ("ecg_anomaly.caption_answer.txt", include_str!("../templates/ecg_anomaly.caption_answer.txt")),
    ("ecg_anomaly.direct.txt", include_str!("../templates/ecg_anomaly.direct.txt")),
    ("ecg_anomaly.simple.txt", include_str!("../templates/ecg_anomaly.simple.txt")),
    ("galaxy_classify.caption_answer.txt", include_str!("../templates/galaxy_classify.caption_answer.txt")),
    ("galaxy_classify.direct.txt", include_str!("../templates/galaxy_classify.direct.txt")),
    ("galaxy_classify.simple.txt", include_str!("../templates/galaxy_classify.simple.txt")),
    ("imagenetc_classify.caption_answer.txt", include_str!("../templates/imagenetc_classify.caption_answer.txt")),
    ("imagenetc_classify.direct.txt", include_str!("../templates/imagenetc_classify.direct.txt")),
    ("imagenetc_classify.simple.txt", include_str!("../templates/imagenetc_classify.simple.txt")),
];

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("unknown catalog id {0:?}")]
    UnknownCatalog(String),
    #[error("unknown strategy {0:?}")]
    UnknownStrategy(String),
    #[error("caption catalog {0} takes no strategy")]
    StrategyForCaption(CatalogId),
    #[error("no template for {0} with strategy {1}")]
    MissingTemplate(CatalogId, Strategy),
    #[error("template {file}: {message}")]
    Parse { file: String, message: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, PromptError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CatalogId {
    CifarAnomaly,
    EcgAnomaly,
    ImagenetcClassify,
    GalaxyClassify,
    CaptionImagenet,
    CaptionGalaxy,
}

impl CatalogId {
    pub const ALL: [CatalogId; 6] = [
        CatalogId::CifarAnomaly,
        CatalogId::EcgAnomaly,
        CatalogId::ImagenetcClassify,
        CatalogId::GalaxyClassify,
        CatalogId::CaptionImagenet,
        CatalogId::CaptionGalaxy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CatalogId::CifarAnomaly => "cifar_anomaly",
            CatalogId::EcgAnomaly => "ecg_anomaly",
            CatalogId::ImagenetcClassify => "imagenetc_classify",
            CatalogId::GalaxyClassify => "galaxy_classify",
            CatalogId::CaptionImagenet => "caption_imagenet",
            CatalogId::CaptionGalaxy => "caption_galaxy",
        }
    }

    pub fn is_caption(self) -> bool {
        matches!(self, CatalogId::CaptionImagenet | CatalogId::CaptionGalaxy)
    }
}

impl fmt::Display for CatalogId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CatalogId {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self> {
        CatalogId::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| PromptError::UnknownCatalog(s.to_string()))
    }
}

/// Answer-format strategy: reason then answer, answer only, or caption then
/// answer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Simple,
    Direct,
    CaptionAnswer,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Simple, Strategy::Direct, Strategy::CaptionAnswer];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Simple => "simple",
            Strategy::Direct => "direct",
            Strategy::CaptionAnswer => "caption_answer",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| PromptError::UnknownStrategy(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub file: String,
    pub catalog_id: CatalogId,
    pub strategy: Option<Strategy>,
    pub answer_key: Option<String>,
    pub label_space: Vec<String>,
    pub rejection_tokens: Vec<String>,
    /// Body with the rejection markers still in place.
    pub body: String,
    /// Raw file contents; the catalog fingerprint hashes these.
    pub source: String,
}

impl PromptTemplate {
    pub fn parse(file: &str, source: &str) -> Result<Self> {
        let err = |message: String| PromptError::Parse { file: file.to_string(), message };
        let source_norm = source.replace("\r\n", "\n");
        let (front, body) = source_norm
            .split_once("\n---\n")
            .ok_or_else(|| err("missing `---` separator after front matter".into()))?;
        let mut fields = BTreeMap::new();
        for line in front.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once(':').ok_or_else(|| err(format!("bad front matter line {line:?}")))?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        let catalog_id: CatalogId = fields
            .get("catalog_id")
            .ok_or_else(|| err("catalog_id missing".into()))?
            .parse()?;
        let strategy = fields.get("strategy").map(|s| s.parse::<Strategy>()).transpose()?;
        let list = |key: &str| -> Vec<String> {
            fields
                .get(key)
                .map(|v| v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
                .unwrap_or_default()
        };
        let label_space = list("label_space");
        let mut rejection_tokens = list("rejection_tokens");
        let answer_key = fields.get("answer_key").cloned().filter(|s| !s.is_empty());
        let body = body.strip_suffix('\n').unwrap_or(body).to_string();

        if catalog_id.is_caption() {
            if strategy.is_some() || answer_key.is_some() || !label_space.is_empty() {
                return Err(err("caption templates take no strategy, answer key or label space".into()));
            }
        } else {
            if strategy.is_none() {
                return Err(err("classification template without strategy".into()));
            }
            if answer_key.is_none() {
                return Err(err("classification template without answer_key".into()));
            }
            if label_space.is_empty() {
                return Err(err("classification template without label_space".into()));
            }
            if rejection_tokens.is_empty() {
                rejection_tokens.push("unknown".into());
            }
            for label in &label_space {
                if !mentions_word(&body, label) {
                    return Err(err(format!("label {label:?} does not appear in the body")));
                }
            }
        }
        let opens = body.matches(REJECT_OPEN).count();
        let closes = body.matches(REJECT_CLOSE).count();
        if opens != closes || opens > 1 {
            return Err(err("expected at most one [[reject]]...[[/reject]] span".into()));
        }
        if let (Some(a), Some(b)) = (body.find(REJECT_OPEN), body.find(REJECT_CLOSE)) {
            if b < a {
                return Err(err("[[/reject]] before [[reject]]".into()));
            }
        }
        Ok(PromptTemplate {
            file: file.to_string(),
            catalog_id,
            strategy,
            answer_key,
            label_space,
            rejection_tokens,
            body,
            source: source.to_string(),
        })
    }

    /// The rejection clause text, if the template has one.
    pub fn rejection_clause(&self) -> Option<&str> {
        let start = self.body.find(REJECT_OPEN)? + REJECT_OPEN.len();
        let end = self.body.find(REJECT_CLOSE)?;
        Some(&self.body[start..end])
    }

    /// Instruction text with the rejection span kept or dropped.
    pub fn text(&self, rejection_enabled: bool) -> String {
        match (self.body.find(REJECT_OPEN), self.body.find(REJECT_CLOSE)) {
            (Some(a), Some(b)) => {
                let clause = if rejection_enabled { &self.body[a + REJECT_OPEN.len()..b] } else { "" };
                format!("{}{}{}", &self.body[..a], clause, &self.body[b + REJECT_CLOSE.len()..])
            }
            _ => self.body.clone(),
        }
    }
}

fn mentions_word(text: &str, word: &str) -> bool {
    let is_word = |c: char| c.is_alphanumeric() || c == '_';
    text.match_indices(word).any(|(i, _)| {
        let before = text[..i].chars().next_back();
        let after = text[i + word.len()..].chars().next();
        !before.is_some_and(is_word) && !after.is_some_and(is_word)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
}

/// Reference to the image attached to a message.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub sample_id: String,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub text: String,
    pub image: Option<ImageRef>,
}

/// How instruction text and image are laid out across chat turns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageLayout {
    /// One user turn carrying the instruction and the image.
    #[default]
    SingleUser,
    /// Instruction in a system turn, image alone in the user turn.
    SystemInstruction,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub catalog_id: CatalogId,
    pub strategy: Option<Strategy>,
    pub rejection_enabled: bool,
    pub messages: Vec<Message>,
    pub answer_key: Option<String>,
    pub label_space: Vec<String>,
    pub rejection_tokens: Vec<String>,
}

impl RenderedPrompt {
    pub fn image(&self) -> &ImageRef {
        self.messages.iter().find_map(|m| m.image.as_ref()).expect("rendered prompts carry one image")
    }

    /// All instruction text, concatenated across turns.
    pub fn instruction(&self) -> String {
        self.messages.iter().map(|m| m.text.as_str()).filter(|t| !t.is_empty()).collect::<Vec<_>>().join("\n")
    }

    /// Stable digest of the rendered text and metadata (excluding the image
    /// path, which is keyed separately by sample id).
    pub fn digest(&self) -> String {
        let parts: Vec<String> = self
            .messages
            .iter()
            .map(|m| format!("{:?}\u{1f}{}\u{1f}{}", m.role, m.text, m.image.is_some()))
            .collect();
        sha256_hex(parts.join("\u{1e}").as_bytes())
    }
}

/// Immutable set of templates keyed by (catalog, strategy).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptCatalog {
    templates: BTreeMap<(CatalogId, Option<Strategy>), PromptTemplate>,
}

impl PromptCatalog {
    /// The catalog shipped with the crate.
    pub fn builtin() -> Self {
        Self::from_sources(BUILTIN.iter().map(|(n, s)| (n.to_string(), s.to_string())))
            .expect("builtin templates are valid")
    }

    pub fn from_sources(sources: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut templates = BTreeMap::new();
        for (name, text) in sources {
            let t = PromptTemplate::parse(&name, &text)?;
            let key = (t.catalog_id, t.strategy);
            if let Some(prev) = templates.insert(key, t) {
                return Err(PromptError::Parse {
                    file: name,
                    message: format!("duplicates {}", prev.file),
                });
            }
        }
        let catalog = PromptCatalog { templates };
        for id in CatalogId::ALL {
            let strategy = (!id.is_caption()).then_some(Strategy::Simple);
            if !catalog.templates.contains_key(&(id, strategy)) {
                return Err(PromptError::Parse {
                    file: id.to_string(),
                    message: "catalog lacks this template".into(),
                });
            }
        }
        Ok(catalog)
    }

    /// Loads every `*.txt` template in `dir`, overriding nothing: the
    /// directory must hold a complete catalog.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let io = |source| PromptError::Io { path: dir.to_path_buf(), source };
        let mut sources = Vec::new();
        for entry in std::fs::read_dir(dir).map_err(io)? {
            let path = entry.map_err(|source| PromptError::Io { path: dir.to_path_buf(), source })?.path();
            if path.extension().and_then(|e| e.to_str()) == Some("txt") {
                let text = std::fs::read_to_string(&path)
                    .map_err(|source| PromptError::Io { path: path.clone(), source })?;
                let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
                sources.push((name, text));
            }
        }
        Self::from_sources(sources)
    }

    pub fn templates(&self) -> impl Iterator<Item = &PromptTemplate> {
        self.templates.values()
    }

    pub fn template(&self, catalog_id: CatalogId, strategy: Option<Strategy>) -> Result<&PromptTemplate> {
        if catalog_id.is_caption() {
            if strategy.is_some() {
                return Err(PromptError::StrategyForCaption(catalog_id));
            }
            return self
                .templates
                .get(&(catalog_id, None))
                .ok_or(PromptError::MissingTemplate(catalog_id, Strategy::Simple));
        }
        let s = strategy.unwrap_or_default();
        self.templates.get(&(catalog_id, Some(s))).ok_or(PromptError::MissingTemplate(catalog_id, s))
    }

    /// Stable hash over every template file (name and contents).
    pub fn fingerprint(&self) -> String {
        let mut joined = String::new();
        for t in self.templates.values() {
            joined.push_str(&t.file);
            joined.push('\u{1f}');
            joined.push_str(&t.source);
            joined.push('\u{1e}');
        }
        sha256_hex(joined.as_bytes())
    }

    /// Every distinct rejection clause, trimmed. Used by the mock server to
    /// tell whether a request carries a rejection instruction.
    pub fn rejection_clauses(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .templates
            .values()
            .filter_map(|t| t.rejection_clause())
            .map(|c| c.trim().to_string())
            .filter(|c| !c.is_empty())
            .collect();
        v.sort();
        v.dedup();
        v
    }

    /// Renders a template into a message sequence with a single image.
    /// Caption catalogs take no strategy and ignore `rejection_enabled`.
    pub fn render(
        &self,
        catalog_id: CatalogId,
        strategy: Option<Strategy>,
        rejection_enabled: bool,
        image: ImageRef,
        layout: MessageLayout,
    ) -> Result<RenderedPrompt> {
        let t = self.template(catalog_id, strategy)?;
        let rejection_enabled = rejection_enabled && !catalog_id.is_caption();
        let text = t.text(rejection_enabled);
        let messages = match layout {
            MessageLayout::SingleUser => vec![Message { role: Role::User, text, image: Some(image) }],
            MessageLayout::SystemInstruction => vec![
                Message { role: Role::System, text, image: None },
                Message { role: Role::User, text: String::new(), image: Some(image) },
            ],
        };
        Ok(RenderedPrompt {
            catalog_id,
            strategy: t.strategy,
            rejection_enabled,
            messages,
            answer_key: t.answer_key.clone(),
            label_space: t.label_space.clone(),
            rejection_tokens: t.rejection_tokens.clone(),
        })
    }
}

/// Fingerprint of the builtin catalog.
pub fn catalog_fingerprint() -> String {
    PromptCatalog::builtin().fingerprint()
}
