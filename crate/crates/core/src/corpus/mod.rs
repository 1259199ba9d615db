//! Evaluation corpus construction.
//!
//! Four recipes produce manifests consumed by the runner:
//!
//! | task               | in-label-space role              | anomaly / ambiguity axis          |
//! |--------------------|----------------------------------|-----------------------------------|
//! | `cifar_vs_not`     | ImageNet images mapped to CIFAR  | unmapped ImageNet images          |
//! | `ecg_vs_not`       | rendered normal/abnormal ECGs    | synthetic random line plots       |
//! | `imagenetc_reject` | mapped ImageNet images           | corruption kind x severity 1-5    |
//! | `galaxy_reject`    | Galaxy Zoo, four morphologies    | annotator disagreement bins 1-3   |
//!
//! Every image is persisted as lossless PNG and hashed; the manifest is one
//! JSON object per line plus a sidecar metadata file.

mod build;
mod classmap;
mod corrupt;
mod ecg;
mod manifest;

pub use build::{
    bin_galaxy_disagreement, build_cifar_vs_not, build_corruption_grid, build_ecg_corpus,
    build_galaxy_corpus, scan_labeled_tree, GalaxyRecord, GALAXY_CLASSES,
};
pub use classmap::ClassMap;
pub use corrupt::{
    apply_corruption, apply_defocus_blur, apply_gaussian_noise, apply_pixelate, convolve_plane,
    defocus_blur, disk_kernel, gaussian_noise, pixelate_blocks, pixelate_fraction, pixelate_to,
    psnr, CorruptionKind, CorruptionSpec, Kernel, SeverityTable,
};
pub use ecg::{
    ecg_polyline, generate_ecg_anomaly, rasterize_polyline, sample_series, DistFamily,
    EcgAnomalySpec, EcgPolyline,
};
pub use manifest::{GridMeta, Manifest, ManifestEntry, ManifestMeta, TruthRole, IMAGE_DIR, MANIFEST_FILE, META_FILE};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::PathBuf;

/// Largest severity level; 0 is the clean image.
pub const MAX_SEVERITY: u8 = 5;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("invalid severity {0} (expected 0..=5, or 1..=5 for a corruption spec)")]
    InvalidSeverity(u8),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("image buffer is empty")]
    EmptyImage,
    #[error("sample {0} is already corrupted (severity {1}); corruptions apply to clean images only")]
    AlreadyCorrupted(String, u8),
    #[error("image {width}x{height} is too small to pixelate with factor {factor}")]
    TooSmall { width: u32, height: u32, factor: u32 },
    #[error("degenerate series: all points identical, cannot scale to canvas")]
    DegenerateSeries,
    #[error("invalid ECG anomaly spec: {0}")]
    InvalidEcgSpec(String),
    #[error("insufficient images for role {role}: need {needed}, found {found}")]
    Insufficient { role: String, needed: usize, found: usize },
    #[error("unknown class index directory {0:?} in source tree")]
    UnknownClassIndex(String),
    #[error("class map is invalid: {0}")]
    InvalidClassMap(String),
    #[error("leaf_prob {0} is outside [0, 1]")]
    LeafProbOutOfRange(f64),
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("manifest is invalid: {0}")]
    InvalidManifest(String),
    #[error("hash mismatch for {file}: manifest says {expected}, file hashes to {actual}")]
    HashMismatch { file: String, expected: String, actual: String },
    #[error("source directory {0} does not exist")]
    MissingSource(PathBuf),
    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CorpusError {
    let path = path.into();
    move |source| CorpusError::Io { path, source }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    CifarVsNot,
    EcgVsNot,
    ImagenetcReject,
    GalaxyReject,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::CifarVsNot => "cifar_vs_not",
            Task::EcgVsNot => "ecg_vs_not",
            Task::ImagenetcReject => "imagenetc_reject",
            Task::GalaxyReject => "galaxy_reject",
        }
    }

    /// Anomaly tasks are scored with precision/recall; the others with
    /// selective accuracy.
    pub fn is_anomaly_task(self) -> bool {
        matches!(self, Task::CifarVsNot | Task::EcgVsNot)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Ground-truth role of a sample.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Truth {
    InLabelSpace(String),
    Anomaly,
}

impl Truth {
    pub fn is_anomaly(&self) -> bool {
        matches!(self, Truth::Anomaly)
    }

    pub fn class_name(&self) -> Option<&str> {
        match self {
            Truth::InLabelSpace(c) => Some(c),
            Truth::Anomaly => None,
        }
    }
}

/// One evaluation image with its ground-truth role and provenance.
#[derive(Clone, Debug)]
pub struct ImageSample {
    pub id: String,
    pub pixels: RgbImage,
    pub task: Task,
    pub truth: Truth,
    pub severity: u8,
    pub corruption: Option<CorruptionKind>,
    pub ambiguity_bin: Option<u8>,
    pub source: String,
}

impl ImageSample {
    /// A clean (severity 0) sample.
    pub fn clean(
        id: impl Into<String>,
        pixels: RgbImage,
        task: Task,
        truth: Truth,
        source: impl Into<String>,
    ) -> Self {
        ImageSample {
            id: id.into(),
            pixels,
            task,
            truth,
            severity: 0,
            corruption: None,
            ambiguity_bin: None,
            source: source.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.severity > MAX_SEVERITY {
            return Err(CorpusError::InvalidSeverity(self.severity));
        }
        if self.id.is_empty() {
            return Err(CorpusError::InvalidSample("empty id".into()));
        }
        let is_galaxy = self.task == Task::GalaxyReject;
        match self.ambiguity_bin {
            Some(b) if !is_galaxy => {
                return Err(CorpusError::InvalidSample(format!(
                    "{}: ambiguity bin {b} on non-galaxy task",
                    self.id
                )))
            }
            Some(b) if !(1..=3).contains(&b) => {
                return Err(CorpusError::InvalidSample(format!(
                    "{}: ambiguity bin {b} outside 1..=3",
                    self.id
                )))
            }
            None if is_galaxy => {
                return Err(CorpusError::InvalidSample(format!(
                    "{}: galaxy sample without ambiguity bin",
                    self.id
                )))
            }
            _ => {}
        }
        if (self.severity == 0) != self.corruption.is_none() {
            return Err(CorpusError::InvalidSample(format!(
                "{}: severity {} inconsistent with corruption kind {:?}",
                self.id, self.severity, self.corruption
            )));
        }
        if self.pixels.width() == 0 || self.pixels.height() == 0 {
            return Err(CorpusError::EmptyImage);
        }
        Ok(())
    }
}
