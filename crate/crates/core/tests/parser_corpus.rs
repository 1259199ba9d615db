use serde::Deserialize;
use vlm_uq::parser::{parse_answer, Outcome};

#[derive(Deserialize)]
struct Case {
    style: String,
    labels: String,
    raw: String,
    expected: String,
}

fn label_space(name: &str) -> Vec<String> {
    let v: &[&str] = match name {
        "cifar10" => &["airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck"],
        "ecg" => &["normal", "abnormal"],
        "galaxy" => &["smooth_round", "smooth_cigar", "edge_on_disk", "unbarred_spiral"],
        other => panic!("unknown label set {other}"),
    };
    v.iter().map(|s| s.to_string()).collect()
}

fn cases() -> Vec<Case> {
    let text = include_str!("../fixtures/parser_corpus.jsonl");
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn corpus_parses_to_expected_outcomes() {
    let cases = cases();
    let mut failures = Vec::new();
    for c in &cases {
        let key = match c.style.as_str() {
            "answer" => "Answer:",
            "label" => "Label:",
            s => panic!("unknown style {s}"),
        };
        let want = match c.expected.as_str() {
            "<rejected>" => Outcome::Rejected,
            "<malformed>" => Outcome::Malformed,
            l => Outcome::Label(l.to_string()),
        };
        let got = parse_answer(&c.raw, key, &label_space(&c.labels), &["unknown".to_string()]);
        if got.outcome != want {
            failures.push(format!("{:?}: want {want:?}, got {:?}", c.raw, got.outcome));
        }
    }
    assert!(failures.is_empty(), "{} failures:\n{}", failures.len(), failures.join("\n"));
}

#[test]
fn corpus_covers_both_styles() {
    let cases = cases();
    for style in ["answer", "label"] {
        let of_style: Vec<&Case> = cases.iter().filter(|c| c.style == style).collect();
        assert!(of_style.len() >= 60, "{style}: {}", of_style.len());
        assert!(of_style.iter().any(|c| c.expected == "<rejected>"));
        assert!(of_style.iter().any(|c| c.expected == "<malformed>"));
        assert!(of_style.iter().any(|c| c.raw.contains("Reasoning:")));
    }
}
