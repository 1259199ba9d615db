//! Manifest recipes. All builders are deterministic given their seed:
//! selection uses a seeded ChaCha stream over a sorted file listing, and
//! per-sample seeds are derived by hashing.

use super::manifest::{encode_png, persist_sample, write_atomic, GridMeta, IMAGE_DIR};
use super::{
    apply_corruption, generate_ecg_anomaly, io_err, ClassMap, CorpusError, CorruptionKind, CorruptionSpec,
    EcgAnomalySpec, ImageSample, Manifest, ManifestEntry, Result, SeverityTable, Task, Truth,
};
use crate::seed::{derive, sha256_hex};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Deserialize;
use std::fs;
use std::path::{Path, PathBuf};

/// Number of ImageNet classes; class directories must be below this.
const SOURCE_CLASSES: u32 = 1000;

/// The four Galaxy-MNIST morphologies kept from Galaxy Zoo.
pub const GALAXY_CLASSES: [&str; 4] = ["smooth_round", "smooth_cigar", "edge_on_disk", "unbarred_spiral"];

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(CorpusError::MissingSource(dir.to_path_buf()));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()).map_err(io_err(dir)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    files.sort();
    Ok(files)
}

/// Lists a tree laid out as `<root>/<class index>/<image>`; class
/// directories are decimal ImageNet indices (leading zeros allowed).
pub fn scan_labeled_tree(root: &Path) -> Result<Vec<(u32, PathBuf)>> {
    if !root.is_dir() {
        return Err(CorpusError::MissingSource(root.to_path_buf()));
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let path = entry.map_err(io_err(root))?.path();
        if !path.is_dir() {
            continue;
        }
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if name.starts_with('.') {
            continue;
        }
        let index = match name.parse::<u32>() {
            Ok(i) if i < SOURCE_CLASSES => i,
            _ => return Err(CorpusError::UnknownClassIndex(name)),
        };
        out.extend(list_images(&path)?.into_iter().map(|p| (index, p)));
    }
    out.sort();
    Ok(out)
}

fn load_rgb(path: &Path) -> Result<image::RgbImage> {
    let img = image::open(path).map_err(|source| CorpusError::Image { path: path.to_path_buf(), source })?;
    Ok(img.to_rgb8())
}

fn choose<T: Clone>(pool: &[T], n: usize, role: &str, rng: &mut ChaCha8Rng) -> Result<Vec<T>> {
    if pool.len() < n {
        return Err(CorpusError::Insufficient { role: role.to_string(), needed: n, found: pool.len() });
    }
    Ok(index::sample(rng, pool.len(), n).into_iter().map(|i| pool[i].clone()).collect())
}

fn relative(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

fn prepare_out(out_dir: &Path) -> Result<()> {
    let images = out_dir.join(IMAGE_DIR);
    fs::create_dir_all(&images).map_err(io_err(&images))
}

/// CIFAR-10 vs. not: `n_in` images whose class is mapped (labelled with the
/// CIFAR category) and `n_anom` unmapped images (anomalies), shuffled.
pub fn build_cifar_vs_not(
    source_dir: &Path,
    out_dir: &Path,
    map: &ClassMap,
    n_in: usize,
    n_anom: usize,
    seed: u64,
) -> Result<Manifest> {
    map.validate()?;
    let tree = scan_labeled_tree(source_dir)?;
    let (inside, outside): (Vec<_>, Vec<_>) = tree.into_iter().partition(|(c, _)| map.class_of(*c).is_some());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<(Truth, PathBuf)> = choose(&inside, n_in, "in_label_space", &mut rng)?
        .into_iter()
        .map(|(c, p)| (Truth::InLabelSpace(map.class_of(c).expect("partitioned").to_string()), p))
        .collect();
    picks.extend(choose(&outside, n_anom, "anomaly", &mut rng)?.into_iter().map(|(_, p)| (Truth::Anomaly, p)));
    picks.shuffle(&mut rng);

    prepare_out(out_dir)?;
    let entries = picks
        .par_iter()
        .enumerate()
        .map(|(i, (truth, path))| {
            let sample = ImageSample::clean(
                format!("cifar_vs_not-{i:05}"),
                load_rgb(path)?,
                Task::CifarVsNot,
                truth.clone(),
                relative(path, source_dir),
            );
            persist_sample(out_dir, &sample)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest::assemble(out_dir, Task::CifarVsNot, seed, entries);
    manifest.write()?;
    Ok(manifest)
}

/// ECG vs. not: `n_each` normal, abnormal and synthetic anomaly images.
/// Anomalies use per-sample seeds derived from `seed`; `anomaly` shapes
/// everything but the seed.
pub fn build_ecg_corpus(
    normal_dir: &Path,
    abnormal_dir: &Path,
    out_dir: &Path,
    n_each: usize,
    seed: u64,
    anomaly: &EcgAnomalySpec,
) -> Result<Manifest> {
    anomaly.validate()?;
    let normal = list_images(normal_dir)?;
    let abnormal = list_images(abnormal_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    enum Role {
        Rendered(Truth, PathBuf, PathBuf),
        Synthetic(u64),
    }
    let mut plan: Vec<Role> = Vec::with_capacity(3 * n_each);
    for p in choose(&normal, n_each, "normal", &mut rng)? {
        plan.push(Role::Rendered(Truth::InLabelSpace("normal".into()), p, normal_dir.to_path_buf()));
    }
    for p in choose(&abnormal, n_each, "abnormal", &mut rng)? {
        plan.push(Role::Rendered(Truth::InLabelSpace("abnormal".into()), p, abnormal_dir.to_path_buf()));
    }
    let generator_seeds: Vec<u64> =
        (0..n_each).map(|i| derive(seed, &["ecg_anomaly", &i.to_string()])).collect();
    plan.extend(generator_seeds.iter().map(|&s| Role::Synthetic(s)));
    plan.shuffle(&mut rng);

    prepare_out(out_dir)?;
    let entries = plan
        .par_iter()
        .enumerate()
        .map(|(i, role)| {
            let id = format!("ecg_vs_not-{i:05}");
            let sample = match role {
                Role::Rendered(truth, path, base) => ImageSample::clean(
                    id,
                    load_rgb(path)?,
                    Task::EcgVsNot,
                    truth.clone(),
                    format!("{}/{}", base.file_name().and_then(|n| n.to_str()).unwrap_or(""), relative(path, base)),
                ),
                Role::Synthetic(s) => generate_ecg_anomaly(&EcgAnomalySpec { seed: *s, ..anomaly.clone() }, id)?,
            };
            persist_sample(out_dir, &sample)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut manifest = Manifest::assemble(out_dir, Task::EcgVsNot, seed, entries);
    manifest.meta.generator_seeds = generator_seeds;
    if manifest.is_empty() {
        manifest.meta.warnings.push("empty manifest: n_each = 0".into());
    }
    manifest.write()?;
    Ok(manifest)
}

/// Writes the clean copy of a source image. RGB8 PNG sources are copied
/// byte-for-byte; anything else is decoded and re-encoded losslessly.
fn persist_clean(out_dir: &Path, sample: &ImageSample, source_path: &Path) -> Result<ManifestEntry> {
    sample.validate()?;
    let rel = format!("{IMAGE_DIR}/{}.png", sample.id);
    let original = fs::read(source_path).map_err(io_err(source_path))?;
    let reusable = image::load_from_memory_with_format(&original, image::ImageFormat::Png)
        .map(|img| img.color() == image::ColorType::Rgb8)
        .unwrap_or(false);
    let bytes = if reusable { original } else { encode_png(&sample.pixels) };
    write_atomic(&out_dir.join(&rel), &bytes)?;
    Ok(ManifestEntry::from_sample(sample, rel, sha256_hex(&bytes)))
}

/// Corruption grid: `n` mapped images chosen once, emitted clean (severity
/// 0) and under every (kind, severity) pair.
#[allow(clippy::too_many_arguments)]
pub fn build_corruption_grid(
    source_dir: &Path,
    out_dir: &Path,
    map: &ClassMap,
    n: usize,
    kinds: &[CorruptionKind],
    severities: &[u8],
    seed: u64,
    table: &SeverityTable,
) -> Result<Manifest> {
    map.validate()?;
    table.validate()?;
    let specs: Vec<CorruptionSpec> = kinds
        .iter()
        .flat_map(|&k| severities.iter().map(move |&s| CorruptionSpec::new(k, s)))
        .collect::<Result<Vec<_>>>()?;
    let tree = scan_labeled_tree(source_dir)?;
    let inside: Vec<(u32, PathBuf)> = tree.into_iter().filter(|(c, _)| map.class_of(*c).is_some()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = choose(&inside, n, "in_label_space", &mut rng)?;
    picks.sort();

    prepare_out(out_dir)?;
    let per_source = picks
        .par_iter()
        .enumerate()
        .map(|(j, (class, path))| {
            let base = format!("imagenetc-{j:05}");
            let clean = ImageSample::clean(
                format!("{base}-clean"),
                load_rgb(path)?,
                Task::ImagenetcReject,
                Truth::InLabelSpace(map.class_of(*class).expect("filtered").to_string()),
                relative(path, source_dir),
            );
            let mut entries = vec![persist_clean(out_dir, &clean, path)?];
            for spec in &specs {
                let noise_seed = derive(seed, &[&base, spec.kind.as_str(), &spec.severity.to_string()]);
                let mut s = apply_corruption(&clean, *spec, noise_seed, table)?;
                s.id = format!("{base}-{}-s{}", spec.kind, spec.severity);
                entries.push(persist_sample(out_dir, &s)?);
            }
            Ok(entries)
        })
        .collect::<Result<Vec<_>>>()?;
    let entries: Vec<ManifestEntry> = per_source.into_iter().flatten().collect();
    let mut manifest = Manifest::assemble(out_dir, Task::ImagenetcReject, seed, entries);
    let mut sev: Vec<u8> = severities.to_vec();
    sev.sort_unstable();
    sev.dedup();
    manifest.meta.corruption_grid = Some(GridMeta { kinds: kinds.to_vec(), severities: sev, n_sources: n });
    manifest.meta.severity_table = Some(table.clone());
    manifest.write()?;
    Ok(manifest)
}

/// Annotator-disagreement level from `leaf_prob`: (0.75, 1] -> 1,
/// (0.5, 0.75] -> 2, [0, 0.5] -> 3.
pub fn bin_galaxy_disagreement(leaf_prob: f64) -> Result<u8> {
    if !(0.0..=1.0).contains(&leaf_prob) {
        return Err(CorpusError::LeafProbOutOfRange(leaf_prob));
    }
    Ok(if leaf_prob > 0.75 {
        1
    } else if leaf_prob > 0.5 {
        2
    } else {
        3
    })
}

/// One row of the Galaxy Zoo metadata table.
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct GalaxyRecord {
    pub id: String,
    pub leaf_prob: f64,
    pub label: String,
}

fn find_galaxy_image(dir: &Path, id: &str) -> Option<PathBuf> {
    ["png", "jpg", "jpeg"].iter().map(|ext| dir.join(format!("{id}.{ext}"))).find(|p| p.is_file())
}

/// Galaxy Zoo: samples `n` galaxies whose majority label is one of the four
/// Galaxy-MNIST classes and bins them by annotator agreement.
pub fn build_galaxy_corpus(
    metadata_csv: &Path,
    image_dir: &Path,
    out_dir: &Path,
    n: usize,
    seed: u64,
) -> Result<Manifest> {
    if !image_dir.is_dir() {
        return Err(CorpusError::MissingSource(image_dir.to_path_buf()));
    }
    let mut reader = csv::Reader::from_path(metadata_csv)
        .map_err(|e| CorpusError::Format(format!("{}: {e}", metadata_csv.display())))?;
    let mut pool = Vec::new();
    for row in reader.deserialize::<GalaxyRecord>() {
        let rec = row.map_err(|e| CorpusError::Format(format!("{}: {e}", metadata_csv.display())))?;
        bin_galaxy_disagreement(rec.leaf_prob)?;
        if GALAXY_CLASSES.contains(&rec.label.as_str()) {
            pool.push(rec);
        }
    }
    pool.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = choose(&pool, n, "galaxy", &mut rng)?;

    prepare_out(out_dir)?;
    let entries = picks
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let path = find_galaxy_image(image_dir, &rec.id)
                .ok_or_else(|| CorpusError::MissingSource(image_dir.join(&rec.id)))?;
            let mut sample = ImageSample::clean(
                format!("galaxy-{i:05}"),
                load_rgb(&path)?,
                Task::GalaxyReject,
                Truth::InLabelSpace(rec.label.clone()),
                format!("galaxy_zoo:{}:leaf_prob={}", rec.id, rec.leaf_prob),
            );
            sample.ambiguity_bin = Some(bin_galaxy_disagreement(rec.leaf_prob)?);
            persist_sample(out_dir, &sample)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest::assemble(out_dir, Task::GalaxyReject, seed, entries);
    manifest.write()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn galaxy_bins_follow_table() {
        assert_eq!(bin_galaxy_disagreement(0.8).unwrap(), 1);
        assert_eq!(bin_galaxy_disagreement(1.0).unwrap(), 1);
        assert_eq!(bin_galaxy_disagreement(0.6).unwrap(), 2);
        assert_eq!(bin_galaxy_disagreement(0.75).unwrap(), 2);
        assert_eq!(bin_galaxy_disagreement(0.5).unwrap(), 3);
        assert_eq!(bin_galaxy_disagreement(0.0).unwrap(), 3);
        assert!(bin_galaxy_disagreement(1.01).is_err());
        assert!(bin_galaxy_disagreement(-0.1).is_err());
        assert!(bin_galaxy_disagreement(f64::NAN).is_err());
    }

    #[test]
    fn non_numeric_class_dir_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("n01440764")).unwrap();
        assert!(matches!(scan_labeled_tree(dir.path()), Err(CorpusError::UnknownClassIndex(_))));
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("1000")).unwrap();
        assert!(matches!(scan_labeled_tree(dir.path()), Err(CorpusError::UnknownClassIndex(_))));
    }

    #[test]
    fn missing_source_dir() {
        let err = scan_labeled_tree(Path::new("/definitely/not/here")).unwrap_err();
        assert!(matches!(err, CorpusError::MissingSource(_)));
    }
}
