use super::{io_err, CorpusError, CorruptionKind, ImageSample, Result, SeverityTable, Task, Truth, MAX_SEVERITY};
use crate::seed::sha256_hex;
use image::codecs::png::PngEncoder;
use image::{ImageEncoder, RgbImage};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const META_FILE: &str = "manifest.meta.json";
pub const IMAGE_DIR: &str = "images";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthRole {
    InLabelSpace,
    Anomaly,
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Image path relative to the manifest directory.
    pub file: String,
    pub task: Task,
    pub truth: TruthRole,
    pub class: Option<String>,
    pub severity: u8,
    pub kind: Option<CorruptionKind>,
    pub ambiguity_bin: Option<u8>,
    pub sha256: String,
    pub source: String,
}

impl ManifestEntry {
    pub fn truth(&self) -> Truth {
        match (self.truth, &self.class) {
            (TruthRole::InLabelSpace, Some(c)) => Truth::InLabelSpace(c.clone()),
            _ => Truth::Anomaly,
        }
    }

    /// Role used for per-role counts: the class name, or `anomaly`.
    pub fn role(&self) -> &str {
        match self.truth {
            TruthRole::Anomaly => "anomaly",
            TruthRole::InLabelSpace => self.class.as_deref().unwrap_or(""),
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CorpusError::InvalidManifest(format!("{}: {m}", self.id)));
        if self.severity > MAX_SEVERITY {
            return bad(format!("severity {}", self.severity));
        }
        if (self.severity == 0) != self.kind.is_none() {
            return bad("severity and kind disagree".into());
        }
        match (self.truth, &self.class) {
            (TruthRole::InLabelSpace, None) => return bad("in-label-space entry without class".into()),
            (TruthRole::Anomaly, Some(_)) => return bad("anomaly entry with class".into()),
            _ => {}
        }
        let galaxy = self.task == Task::GalaxyReject;
        match self.ambiguity_bin {
            Some(b) if galaxy && (1..=3).contains(&b) => {}
            None if !galaxy => {}
            _ => return bad(format!("ambiguity bin {:?} for task {}", self.ambiguity_bin, self.task)),
        }
        Ok(())
    }

    pub(crate) fn from_sample(sample: &ImageSample, file: String, sha256: String) -> Self {
        ManifestEntry {
            id: sample.id.clone(),
            file,
            task: sample.task,
            truth: if sample.truth.is_anomaly() { TruthRole::Anomaly } else { TruthRole::InLabelSpace },
            class: sample.truth.class_name().map(str::to_string),
            severity: sample.severity,
            kind: sample.corruption,
            ambiguity_bin: sample.ambiguity_bin,
            sha256,
            source: sample.source.clone(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub kinds: Vec<CorruptionKind>,
    pub severities: Vec<u8>,
    pub n_sources: usize,
}

/// Task-level metadata stored next to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestMeta {
    pub task: Task,
    pub seed: u64,
    pub n_entries: usize,
    pub counts: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corruption_grid: Option<GridMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub severity_table: Option<SeverityTable>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub generator_seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Directory containing the manifest and its images.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub meta: ManifestMeta,
}

pub(crate) fn encode_png(img: &RgbImage) -> Vec<u8> {
    let mut buf = Vec::new();
    PngEncoder::new(&mut buf)
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
        .expect("encoding an in-memory RGB8 image cannot fail");
    buf
}

/// Writes `bytes` to `path` via a temporary sibling and a rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    crate::fsutil::write_atomic(path, bytes).map_err(io_err(path))
}

/// Writes a sample's PNG under `root/images/` and returns its manifest entry.
pub(crate) fn persist_sample(root: &Path, sample: &ImageSample) -> Result<ManifestEntry> {
    sample.validate()?;
    let rel = format!("{IMAGE_DIR}/{}.png", sample.id);
    let bytes = encode_png(&sample.pixels);
    write_atomic(&root.join(&rel), &bytes)?;
    Ok(ManifestEntry::from_sample(sample, rel, sha256_hex(&bytes)))
}

pub(crate) fn role_counts(entries: &[ManifestEntry]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for e in entries {
        *counts.entry(e.role().to_string()).or_insert(0) += 1;
    }
    counts
}

impl Manifest {
    pub(crate) fn assemble(root: &Path, task: Task, seed: u64, entries: Vec<ManifestEntry>) -> Self {
        let meta = ManifestMeta {
            task,
            seed,
            n_entries: entries.len(),
            counts: role_counts(&entries),
            corruption_grid: None,
            severity_table: None,
            generator_seeds: Vec::new(),
            warnings: Vec::new(),
        };
        Manifest { root: root.to_path_buf(), entries, meta }
    }

    /// Persists in-memory samples as PNGs under `root` and writes the
    /// manifest. Sample order is kept.
    pub fn from_samples(root: &Path, task: Task, seed: u64, samples: &[ImageSample]) -> Result<Self> {
        fs::create_dir_all(root.join(IMAGE_DIR)).map_err(io_err(root))?;
        let entries = samples.iter().map(|s| persist_sample(root, s)).collect::<Result<Vec<_>>>()?;
        let m = Manifest::assemble(root, task, seed, entries);
        m.write()?;
        Ok(m)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn image_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.file)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Structural checks: unique ids, consistent fields, counts matching the
    /// recorded metadata.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for e in &self.entries {
            e.validate()?;
            if e.task != self.meta.task {
                return Err(CorpusError::InvalidManifest(format!(
                    "{}: task {} in a {} manifest",
                    e.id, e.task, self.meta.task
                )));
            }
            if !ids.insert(e.id.as_str()) {
                return Err(CorpusError::InvalidManifest(format!("duplicate id {}", e.id)));
            }
        }
        if self.meta.n_entries != self.entries.len() || self.meta.counts != role_counts(&self.entries) {
            return Err(CorpusError::InvalidManifest("entry counts disagree with metadata".into()));
        }
        Ok(())
    }

    /// Re-hashes every referenced image and compares with the recorded hash.
    pub fn verify_files(&self) -> Result<()> {
        for e in &self.entries {
            let path = self.image_path(e);
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            let actual = sha256_hex(&bytes);
            if actual != e.sha256 {
                return Err(CorpusError::HashMismatch { file: e.file.clone(), expected: e.sha256.clone(), actual });
            }
        }
        Ok(())
    }

    /// Writes `manifest.jsonl` and `manifest.meta.json` into `root`.
    pub fn write(&self) -> Result<PathBuf> {
        self.validate()?;
        fs::create_dir_all(&self.root).map_err(io_err(&self.root))?;
        let mut lines = String::new();
        for e in &self.entries {
            lines.push_str(&serde_json::to_string(e).expect("entries serialize"));
            lines.push('\n');
        }
        let path = self.manifest_path();
        write_atomic(&path, lines.as_bytes())?;
        let meta = serde_json::to_vec_pretty(&self.meta).expect("meta serializes");
        write_atomic(&self.root.join(META_FILE), &meta)?;
        Ok(path)
    }

    /// Loads a manifest (path to `manifest.jsonl` or its directory) and
    /// verifies every image hash.
    pub fn load(path: &Path) -> Result<Self> {
        let m = Self::load_unverified(path)?;
        m.verify_files()?;
        Ok(m)
    }

    /// Loads and structurally validates without hashing images.
    pub fn load_unverified(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let text = fs::read_to_string(&file).map_err(io_err(&file))?;
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str::<ManifestEntry>(l)
                    .map_err(|e| CorpusError::Format(format!("{}:{}: {e}", file.display(), i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta_path = root.join(META_FILE);
        let meta: ManifestMeta = match fs::read_to_string(&meta_path) {
            Ok(t) => serde_json::from_str(&t)
                .map_err(|e| CorpusError::Format(format!("{}: {e}", meta_path.display())))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                let task = entries
                    .first()
                    .map(|e| e.task)
                    .ok_or_else(|| CorpusError::InvalidManifest("empty manifest without metadata".into()))?;
                Manifest::assemble(&root, task, 0, entries.clone()).meta
            }
            Err(e) => return Err(CorpusError::Io { path: meta_path, source: e }),
        };
        let m = Manifest { root, entries, meta };
        m.validate()?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn sample(id: &str, class: Option<&str>) -> ImageSample {
        let truth = class.map_or(Truth::Anomaly, |c| Truth::InLabelSpace(c.into()));
        ImageSample::clean(id, RgbImage::from_pixel(4, 4, Rgb([1, 2, 3])), Task::CifarVsNot, truth, "t")
    }

    #[test]
    fn write_then_load_verifies_hashes() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join(IMAGE_DIR)).unwrap();
        let entries = vec![
            persist_sample(dir.path(), &sample("a", Some("cat"))).unwrap(),
            persist_sample(dir.path(), &sample("b", None)).unwrap(),
        ];
        let m = Manifest::assemble(dir.path(), Task::CifarVsNot, 3, entries);
        let path = m.write().unwrap();
        let loaded = Manifest::load(&path).unwrap();
        assert_eq!(loaded.entries, m.entries);
        assert_eq!(loaded.meta.counts.get("anomaly"), Some(&1));

        fs::write(dir.path().join("images/a.png"), b"tampered").unwrap();
        assert!(matches!(Manifest::load(&path), Err(CorpusError::HashMismatch { .. })));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join(IMAGE_DIR)).unwrap();
        let e = persist_sample(dir.path(), &sample("a", Some("cat"))).unwrap();
        let m = Manifest::assemble(dir.path(), Task::CifarVsNot, 0, vec![e.clone(), e]);
        assert!(matches!(m.validate(), Err(CorpusError::InvalidManifest(_))));
    }

    #[test]
    fn entry_line_has_expected_keys() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join(IMAGE_DIR)).unwrap();
        let e = persist_sample(dir.path(), &sample("a", Some("cat"))).unwrap();
        let v: serde_json::Value = serde_json::to_value(&e).unwrap();
        for key in ["id", "file", "task", "truth", "class", "severity", "kind", "ambiguity_bin", "sha256"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["truth"], "in_label_space");
        assert_eq!(v["task"], "cifar_vs_not");
    }
}
