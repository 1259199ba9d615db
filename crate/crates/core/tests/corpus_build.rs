mod common;

use common::*;
use std::collections::BTreeMap;
use std::path::Path;
use vlm_uq::corpus::{
    bin_galaxy_disagreement, build_cifar_vs_not, build_corruption_grid, build_ecg_corpus, build_galaxy_corpus, psnr,
    ClassMap, CorruptionKind, EcgAnomalySpec, SeverityTable, TruthRole,
};
use vlm_uq::Manifest;

fn ids_and_hashes(m: &Manifest) -> Vec<(String, String)> {
    m.entries.iter().map(|e| (e.id.clone(), e.sha256.clone())).collect()
}

fn flat_images(dir: &Path, n: usize, salt: u64) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        noise_image(salt + i as u64, 16, 16).save(dir.join(format!("{i:03}.png"))).unwrap();
    }
}

#[test]
fn cifar_recipe_has_requested_composition_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    imagenet_tree(&src, &MAPPED, 240, 4);
    imagenet_tree(&src, &UNMAPPED, 320, 4);
    let map = ClassMap::imagenet_default();
    let a = build_cifar_vs_not(&src, &tmp.path().join("a"), &map, 1800, 1200, 42).unwrap();
    let b = build_cifar_vs_not(&src, &tmp.path().join("b"), &map, 1800, 1200, 42).unwrap();
    let c = build_cifar_vs_not(&src, &tmp.path().join("c"), &map, 1800, 1200, 43).unwrap();

    assert_eq!(a.entries.len(), 3000);
    assert_eq!(a.entries.iter().filter(|e| e.truth == TruthRole::Anomaly).count(), 1200);
    assert!(a.entries.iter().filter(|e| e.truth == TruthRole::Anomaly).all(|e| e.class.is_none()));
    assert_eq!(ids_and_hashes(&a), ids_and_hashes(&b));
    assert_eq!(
        std::fs::read(a.manifest_path()).unwrap(),
        std::fs::read(b.manifest_path()).unwrap()
    );
    assert_ne!(ids_and_hashes(&a), ids_and_hashes(&c));
    let reloaded = Manifest::load(&a.root).unwrap();
    assert_eq!(reloaded.entries, a.entries);
}

#[test]
fn insufficient_sources_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    imagenet_tree(&src, &MAPPED, 1, 4);
    imagenet_tree(&src, &UNMAPPED, 1, 4);
    let err = build_cifar_vs_not(&src, &tmp.path().join("o"), &ClassMap::imagenet_default(), 100, 1, 0).unwrap_err();
    assert!(err.to_string().contains("in_label_space"), "{err}");
}

#[test]
fn ecg_anomalies_are_byte_identical_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (normal, abnormal) = (tmp.path().join("normal"), tmp.path().join("abnormal"));
    flat_images(&normal, 6, 0);
    flat_images(&abnormal, 6, 100);
    let spec = EcgAnomalySpec::default();
    let a = build_ecg_corpus(&normal, &abnormal, &tmp.path().join("a"), 4, 7, &spec).unwrap();
    let b = build_ecg_corpus(&normal, &abnormal, &tmp.path().join("b"), 4, 7, &spec).unwrap();
    let c = build_ecg_corpus(&normal, &abnormal, &tmp.path().join("c"), 4, 8, &spec).unwrap();
    assert_eq!(a.entries.len(), 12);
    let anomalies = |m: &Manifest| -> Vec<Vec<u8>> {
        m.entries
            .iter()
            .filter(|e| e.truth == TruthRole::Anomaly)
            .map(|e| std::fs::read(m.image_path(e)).unwrap())
            .collect()
    };
    assert_eq!(anomalies(&a).len(), 4);
    assert_eq!(anomalies(&a), anomalies(&b));
    assert_ne!(anomalies(&a), anomalies(&c));
    assert_eq!(a.meta.generator_seeds, b.meta.generator_seeds);
    let counts: BTreeMap<&str, usize> = a.entries.iter().fold(BTreeMap::new(), |mut m, e| {
        *m.entry(e.role()).or_default() += 1;
        m
    });
    assert_eq!(counts, BTreeMap::from([("abnormal", 4), ("anomaly", 4), ("normal", 4)]));
}

#[test]
fn clean_grid_images_are_byte_identical_to_sources() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    imagenet_tree(&src, &MAPPED, 2, 12);
    let m = build_corruption_grid(
        &src,
        &tmp.path().join("grid"),
        &ClassMap::imagenet_default(),
        6,
        &CorruptionKind::ALL,
        &[1, 2, 3, 4, 5],
        3,
        &SeverityTable::default(),
    )
    .unwrap();
    assert_eq!(m.entries.len(), 6 * (1 + 3 * 5));
    let clean: Vec<_> = m.entries.iter().filter(|e| e.severity == 0).collect();
    assert_eq!(clean.len(), 6);
    for e in clean {
        let original = std::fs::read(src.join(&e.source)).unwrap();
        assert_eq!(std::fs::read(m.image_path(e)).unwrap(), original, "{}", e.id);
    }
}

#[test]
fn noise_psnr_strictly_decreases_with_severity() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    imagenet_tree(&src, &MAPPED, 3, 32);
    // Smooth images so that clipping does not flatten high severities.
    for entry in walkdir(&src) {
        let img = image::open(&entry).unwrap().to_rgb8();
        let smooth = image::RgbImage::from_fn(img.width(), img.height(), |x, y| {
            let p = img.get_pixel(x / 8, y / 8);
            image::Rgb([64 + p[0] / 2, 64 + p[1] / 2, 64 + p[2] / 2])
        });
        smooth.save(&entry).unwrap();
    }
    let m = build_corruption_grid(
        &src,
        &tmp.path().join("grid"),
        &ClassMap::imagenet_default(),
        20,
        &[CorruptionKind::GaussianNoise],
        &[1, 2, 3, 4, 5],
        9,
        &SeverityTable::default(),
    )
    .unwrap();
    let load = |e: &vlm_uq::ManifestEntry| image::open(m.image_path(e)).unwrap().to_rgb8();
    let mut probes = 0;
    for clean in m.entries.iter().filter(|e| e.severity == 0) {
        let base = clean.id.trim_end_matches("-clean");
        let reference = load(clean);
        let curve: Vec<f64> = (1..=5)
            .map(|s| {
                let e = m.get(&format!("{base}-gaussian_noise-s{s}")).unwrap();
                psnr(&reference, &load(e))
            })
            .collect();
        for w in curve.windows(2) {
            assert!(w[1] < w[0], "{base}: {curve:?}");
        }
        probes += 1;
    }
    assert_eq!(probes, 20);
}

fn walkdir(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap().flatten() {
        if e.path().is_dir() {
            out.extend(walkdir(&e.path()));
        } else {
            out.push(e.path());
        }
    }
    out
}

#[test]
fn galaxy_bins_and_corpus() {
    let probs = [0.9, 0.8, 0.76, 0.75, 0.6, 0.51, 0.5, 0.2];
    let bins: Vec<u8> = probs.iter().map(|&p| bin_galaxy_disagreement(p).unwrap()).collect();
    assert_eq!(bins, [1, 1, 1, 2, 2, 2, 3, 3]);
    assert!(bin_galaxy_disagreement(1.2).is_err());

    let tmp = tempfile::tempdir().unwrap();
    let images = tmp.path().join("images");
    std::fs::create_dir_all(&images).unwrap();
    let labels = ["smooth_round", "smooth_cigar", "edge_on_disk", "unbarred_spiral", "merger"];
    let mut csv = String::from("id,leaf_prob,label\n");
    for (i, p) in probs.iter().enumerate() {
        let id = format!("g{i}");
        csv.push_str(&format!("{id},{p},{}\n", labels[i % labels.len()]));
        noise_image(i as u64, 8, 8).save(images.join(format!("{id}.png"))).unwrap();
    }
    let meta = tmp.path().join("meta.csv");
    std::fs::write(&meta, csv).unwrap();
    let m = build_galaxy_corpus(&meta, &images, &tmp.path().join("out"), 6, 1).unwrap();
    assert_eq!(m.entries.len(), 6);
    for e in &m.entries {
        let p: f64 = e.source.rsplit('=').next().unwrap().parse().unwrap();
        assert_eq!(e.ambiguity_bin, Some(bin_galaxy_disagreement(p).unwrap()));
        assert_ne!(e.class.as_deref(), Some("merger"));
    }
    assert!(build_galaxy_corpus(&meta, &images, &tmp.path().join("o2"), 8, 1).is_err());
}
