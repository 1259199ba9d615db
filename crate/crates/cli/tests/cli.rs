use std::path::Path;
use std::process::{Command, Output};

fn vlm_uq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vlm-uq")).args(args).output().expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn source_tree(root: &Path) {
    // Five mapped indices and two unmapped ones, four images each.
    for (c, class) in [404u32, 436, 10, 281, 151, 1, 2].iter().enumerate() {
        let dir = root.join(class.to_string());
        std::fs::create_dir_all(&dir).unwrap();
        for i in 0..4u8 {
            let img = image::RgbImage::from_fn(8, 8, |x, y| image::Rgb([x as u8 * 30, y as u8 * 30, c as u8 * 30 + i]));
            img.save(dir.join(format!("{i}.png"))).unwrap();
        }
    }
}

fn build(tmp: &Path) -> std::path::PathBuf {
    source_tree(&tmp.join("src"));
    let out = tmp.join("corpus");
    let o = vlm_uq(&[
        "build-corpus",
        "cifar-vs-not",
        "--source",
        tmp.join("src").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--n-in",
        "12",
        "--n-anom",
        "6",
        "--seed",
        "3",
    ]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("wrote 18 entries"), "{}", text(&o));
    out
}

fn write_config(tmp: &Path, corpus: &Path) -> std::path::PathBuf {
    let cfg = tmp.join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            r#"manifest = "{}"
output_dir = "run"
models = ["mock-vlm"]

[[variants]]
catalog = "cifar_anomaly"

[[variants]]
catalog = "cifar_anomaly"
rejection = false
"#,
            corpus.display()
        ),
    )
    .unwrap();
    cfg
}

#[test]
fn corpus_run_and_report_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = build(tmp.path());
    let cfg = write_config(tmp.path(), &corpus);
    let cfg = cfg.to_str().unwrap();

    let o = vlm_uq(&["run", "--config", cfg, "--mock"]);
    assert!(o.status.success(), "{}", text(&o));
    let out = text(&o);
    assert!(out.contains("36 written"), "{out}");
    assert!(out.contains("1.000   1.000   1.000"), "{out}");
    let reports = tmp.path().join("run").join("reports");
    assert!(reports.join("anomaly.csv").is_file());

    // A second run into the same directory must be explicit.
    let o = vlm_uq(&["run", "--config", cfg, "--mock"]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    let o = vlm_uq(&["run", "--config", cfg, "--mock", "--resume"]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("36 resumed, 0 written"), "{}", text(&o));

    let before = std::fs::read(reports.join("report.json")).unwrap();
    let o = vlm_uq(&[
        "report",
        "--run-dir",
        tmp.path().join("run").to_str().unwrap(),
        "--manifest",
        corpus.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", text(&o));
    assert_eq!(std::fs::read(reports.join("report.json")).unwrap(), before);
    let o = vlm_uq(&["score", "--config", cfg]);
    assert!(o.status.success(), "{}", text(&o));
}

#[test]
fn live_run_without_budget_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = build(tmp.path());
    let cfg = write_config(tmp.path(), &corpus);
    let o = vlm_uq(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", text(&o));
    assert!(text(&o).contains("budget"), "{}", text(&o));
}

#[test]
fn missing_source_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = vlm_uq(&[
        "build-corpus",
        "ecg",
        "--normal",
        tmp.path().join("nope").to_str().unwrap(),
        "--abnormal",
        tmp.path().join("nope2").to_str().unwrap(),
        "--out",
        tmp.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    assert!(text(&o).contains("nope"), "{}", text(&o));
}

#[test]
fn bad_arguments_and_configs_are_validation_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let o = vlm_uq(&["build-corpus", "ecg", "--normal", "a", "--abnormal", "b", "--out", "c", "--family", "cauchy"]);
    assert_eq!(o.status.code(), Some(2));
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "manifest = \"m\"\noutput_dir = \"o\"\nmodels = []\n").unwrap();
    let o = vlm_uq(&["run", "--config", cfg.to_str().unwrap(), "--mock"]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
}

#[test]
fn prompts_are_listed_and_rendered() {
    let o = vlm_uq(&["prompts", "list"]);
    assert!(o.status.success());
    assert!(text(&o).contains("caption_imagenet"));
    let on = text(&vlm_uq(&["prompts", "show", "imagenetc_classify", "--strategy", "direct"]));
    let off = text(&vlm_uq(&["prompts", "show", "imagenetc_classify", "--strategy", "direct", "--no-rejection"]));
    assert!(on.contains("unknown"));
    assert_ne!(on, off);
}
