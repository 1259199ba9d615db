use super::{io_err, CorpusError, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

/// CIFAR-10 category -> set of ImageNet class indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassMap(BTreeMap<String, BTreeSet<u32>>);

const IMAGENET_TO_CIFAR: &[(&str, &[u32])] = &[
    ("airplane", &[404, 895]),
    ("automobile", &[436, 511, 661, 817]),
    ("bird", &[10, 11, 12, 13, 92, 93, 94, 95, 96]),
    ("cat", &[281, 283, 284, 285]),
    // Chihuahua (151), every 20th dog class, and Mexican hairless (268).
    ("dog", &[151, 171, 191, 211, 231, 251, 268]),
    ("frog", &[30, 31]),
    ("ship", &[510, 628, 724, 780, 833]),
    ("truck", &[555, 569, 675, 717, 734, 864, 867]),
];

impl ClassMap {
    /// The ImageNet mapping for eight CIFAR-10 categories; deer and horse
    /// have no exact ImageNet counterpart and are absent.
    pub fn imagenet_default() -> Self {
        let map = IMAGENET_TO_CIFAR
            .iter()
            .map(|(name, idx)| (name.to_string(), idx.iter().copied().collect()))
            .collect();
        ClassMap(map)
    }

    pub fn new(map: BTreeMap<String, BTreeSet<u32>>) -> Result<Self> {
        let m = ClassMap(map);
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let map = serde_json::from_str(&text)
            .map_err(|e| CorpusError::InvalidClassMap(format!("{}: {e}", path.display())))?;
        ClassMap::new(map)
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(CorpusError::InvalidClassMap("no categories".into()));
        }
        let mut seen: BTreeMap<u32, &str> = BTreeMap::new();
        for (name, indices) in &self.0 {
            if indices.is_empty() {
                return Err(CorpusError::InvalidClassMap(format!("{name} has no source classes")));
            }
            for &i in indices {
                if let Some(other) = seen.insert(i, name) {
                    return Err(CorpusError::InvalidClassMap(format!(
                        "index {i} mapped to both {other} and {name}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// The mapped category for a source class index.
    pub fn class_of(&self, index: u32) -> Option<&str> {
        self.0.iter().find(|(_, s)| s.contains(&index)).map(|(n, _)| n.as_str())
    }

    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn indices(&self, category: &str) -> Option<&BTreeSet<u32>> {
        self.0.get(category)
    }
}
