//! Fixtures shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use vlm_uq::client::ClientConfig;
use vlm_uq::corpus::{build_cifar_vs_not, build_corruption_grid, ClassMap, CorruptionKind, SeverityTable};
use vlm_uq::prompts::CatalogId;
use vlm_uq::runner::{CaptionRun, RunConfig, VariantSpec};
use vlm_uq::{DecodeParams, Manifest};

pub const CIFAR10: [&str; 10] = ["airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck"];

/// ImageNet indices mapped to a CIFAR class, and some that are not mapped.
pub const MAPPED: [u32; 8] = [404, 436, 10, 281, 151, 30, 510, 555];
pub const UNMAPPED: [u32; 4] = [1, 2, 3, 4];

pub fn noise_image(seed: u64, w: u32, h: u32) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::from_fn(w, h, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
}

/// Writes `<root>/<index>/<n>.png` noise images.
pub fn imagenet_tree(root: &Path, classes: &[u32], per_class: usize, size: u32) {
    for &c in classes {
        let dir = root.join(c.to_string());
        std::fs::create_dir_all(&dir).unwrap();
        for i in 0..per_class {
            noise_image(c as u64 * 10_000 + i as u64, size, size).save(dir.join(format!("{i:04}.png"))).unwrap();
        }
    }
}

pub fn anomaly_manifest(tmp: &Path, n_in: usize, n_anom: usize, seed: u64) -> Manifest {
    let src = tmp.join("src_cifar");
    if !src.exists() {
        let per = n_in.max(n_anom).div_ceil(4) + 1;
        imagenet_tree(&src, &MAPPED, per, 8);
        imagenet_tree(&src, &UNMAPPED, per, 8);
    }
    build_cifar_vs_not(&src, &tmp.join("cifar_vs_not"), &ClassMap::imagenet_default(), n_in, n_anom, seed).unwrap()
}

pub fn grid_manifest(tmp: &Path, n: usize, kinds: &[CorruptionKind], seed: u64) -> Manifest {
    let src = tmp.join("src_grid");
    if !src.exists() {
        imagenet_tree(&src, &MAPPED, n.div_ceil(8) + 1, 24);
    }
    build_corruption_grid(
        &src,
        &tmp.join("grid"),
        &ClassMap::imagenet_default(),
        n,
        kinds,
        &[1, 2, 3, 4, 5],
        seed,
        &SeverityTable::default(),
    )
    .unwrap()
}

pub fn mock_client(base_url: &str, cache_dir: Option<PathBuf>) -> ClientConfig {
    let mut c = ClientConfig::default();
    c.endpoint.base_url = base_url.to_string();
    c.endpoint.is_mock = true;
    c.endpoint.supports_seed = true;
    c.endpoint.supports_top_k = true;
    c.endpoint.timeout_ms = 2_000;
    c.retry.base_delay_ms = 5;
    c.retry.max_delay_ms = 50;
    c.concurrency = 8;
    c.cache_dir = cache_dir;
    c
}

pub fn variant(catalog: CatalogId, rejection: bool) -> VariantSpec {
    VariantSpec { catalog, strategy: None, rejection }
}

pub fn run_config(manifest: &Manifest, out: &Path, client: ClientConfig, variants: Vec<VariantSpec>) -> RunConfig {
    RunConfig {
        manifest: manifest.root.clone(),
        output_dir: out.to_path_buf(),
        models: vec!["mock-vlm".into()],
        variants,
        decode: DecodeParams::deterministic(),
        captions: None,
        client,
        prompt_dir: None,
        layout: Default::default(),
        abort_failure_fraction: 0.05,
    }
}

pub fn caption_run(catalog: CatalogId, k: u32) -> CaptionRun {
    CaptionRun { catalog, k, embedding_model: "mock-embed".into(), decode: DecodeParams::sampling(k) }
}

pub fn labels() -> Vec<String> {
    CIFAR10.iter().map(|s| s.to_string()).collect()
}
