//! Evaluation reports: JSON and CSV tables plus static SVG line charts.
//!
//! Everything here is a pure function of the manifest and the run logs, so
//! re-scoring the same logs reproduces the same bytes.

use crate::client::QueryRecord;
use crate::corpus::{CorruptionKind, Manifest, ManifestEntry, Task};
use crate::metrics::{
    anomaly_prf, diversity_split, selective_report, AnomalyReport, DiversityScore, DiversitySplit, GroupKey,
    MetricsError, ScoredRecord, SelectiveReport,
};
use crate::parser::Outcome;
use crate::prompts::{CatalogId, Strategy};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("no records to score")]
    Empty,
    #[error("record for {0} has no manifest entry")]
    UnknownSample(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, ReportError>;

/// One diversity score with the sample attributes needed for grouping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityLine {
    pub model_id: String,
    #[serde(flatten)]
    pub score: DiversityScore,
    pub severity: u8,
    pub kind: Option<CorruptionKind>,
    pub ambiguity_bin: Option<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VariantKey {
    pub model_id: String,
    pub catalog_id: CatalogId,
    pub strategy: Option<Strategy>,
    pub rejection_enabled: bool,
}

impl VariantKey {
    pub fn of(r: &QueryRecord) -> Self {
        VariantKey {
            model_id: r.model_id.clone(),
            catalog_id: r.catalog_id,
            strategy: r.strategy,
            rejection_enabled: r.rejection_enabled,
        }
    }

    fn strategy_str(&self) -> &'static str {
        self.strategy.map(|s| s.as_str()).unwrap_or("")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyRow {
    pub variant: VariantKey,
    pub report: AnomalyReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectiveRow {
    pub variant: VariantKey,
    /// Corruption family (clean samples included in each); `None` pools all.
    pub kind: Option<CorruptionKind>,
    pub report: SelectiveReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityMean {
    pub key: u8,
    pub n: usize,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityRow {
    pub model_id: String,
    pub embedding_model_id: String,
    pub group_key: GroupKey,
    pub n_samples: usize,
    pub by_group: Vec<DiversityMean>,
    /// Classification variant used for the rejected/classified split.
    pub joined_variant: Option<VariantKey>,
    pub split: Option<DiversitySplit>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_digest: String,
    pub catalog_fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub provenance: Provenance,
    pub n_records: usize,
    pub anomaly: Vec<AnomalyRow>,
    pub selective: Vec<SelectiveRow>,
    pub diversity: Vec<DiversityRow>,
}

pub fn group_key_for(task: Task) -> GroupKey {
    match task {
        Task::GalaxyReject => GroupKey::AmbiguityBin,
        _ => GroupKey::Severity,
    }
}

/// Joins a classification record with its manifest entry.
pub fn scored(record: &QueryRecord, entry: &ManifestEntry) -> ScoredRecord {
    ScoredRecord {
        sample_id: record.sample_id.clone(),
        truth: entry.truth(),
        severity: entry.severity,
        kind: entry.kind,
        ambiguity_bin: entry.ambiguity_bin,
        outcome: record.parsed.as_ref().map(|p| p.outcome.clone()).unwrap_or(Outcome::Malformed),
    }
}

/// Builds the report from a manifest, the record log and diversity scores.
pub fn build_report(
    manifest: &Manifest,
    records: &[QueryRecord],
    diversity: &[DiversityLine],
    provenance: Provenance,
) -> Result<EvalReport> {
    if records.is_empty() && diversity.is_empty() {
        return Err(ReportError::Empty);
    }
    let entries: BTreeMap<&str, &ManifestEntry> = manifest.entries.iter().map(|e| (e.id.as_str(), e)).collect();
    let task = manifest.meta.task;
    let key = group_key_for(task);

    let mut by_variant: BTreeMap<VariantKey, Vec<ScoredRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.parsed.is_some() || !r.catalog_id.is_caption()) {
        let e = entries.get(r.sample_id.as_str()).ok_or_else(|| ReportError::UnknownSample(r.sample_id.clone()))?;
        by_variant.entry(VariantKey::of(r)).or_default().push(scored(r, e));
    }
    for rs in by_variant.values_mut() {
        rs.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    }

    let mut anomaly = Vec::new();
    let mut selective = Vec::new();
    for (variant, rs) in &by_variant {
        if task.is_anomaly_task() {
            anomaly.push(AnomalyRow { variant: variant.clone(), report: anomaly_prf(rs)? });
            continue;
        }
        selective.push(SelectiveRow { variant: variant.clone(), kind: None, report: selective_report(rs, key)? });
        let kinds: BTreeSet<CorruptionKind> = rs.iter().filter_map(|r| r.kind).collect();
        if kinds.len() > 1 {
            for k in kinds {
                let subset: Vec<ScoredRecord> =
                    rs.iter().filter(|r| r.kind == Some(k) || r.severity == 0).cloned().collect();
                selective.push(SelectiveRow { variant: variant.clone(), kind: Some(k), report: selective_report(&subset, key)? });
            }
        }
    }

    let mut div_by_model: BTreeMap<(String, String), Vec<&DiversityLine>> = BTreeMap::new();
    for d in diversity {
        div_by_model.entry((d.model_id.clone(), d.score.embedding_model_id.clone())).or_default().push(d);
    }
    let mut div_rows = Vec::new();
    for ((model_id, embedding_model_id), lines) in div_by_model {
        let mut groups: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
        for l in &lines {
            let g = match key {
                GroupKey::Severity => l.severity,
                GroupKey::AmbiguityBin => l.ambiguity_bin.unwrap_or(0),
            };
            groups.entry(g).or_default().push(l.score.score);
        }
        let by_group = groups
            .into_iter()
            .map(|(key, v)| DiversityMean { key, n: v.len(), mean: v.iter().sum::<f64>() / v.len() as f64 })
            .collect();
        let joined = by_variant
            .keys()
            .filter(|v| v.model_id == model_id && v.rejection_enabled)
            .min_by_key(|v| (v.strategy != Some(Strategy::Simple), (*v).clone()))
            .cloned();
        let split = match &joined {
            Some(v) => {
                let scores: Vec<DiversityScore> = lines.iter().map(|l| l.score.clone()).collect();
                Some(diversity_split(&scores, &by_variant[v], key)?)
            }
            None => None,
        };
        div_rows.push(DiversityRow {
            model_id,
            embedding_model_id,
            group_key: key,
            n_samples: lines.len(),
            by_group,
            joined_variant: joined,
            split,
        });
    }

    Ok(EvalReport {
        task,
        provenance,
        n_records: records.len(),
        anomaly,
        selective,
        diversity: div_rows,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' }).collect()
}

fn csv_bytes(header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| ReportError::Io { path: PathBuf::new(), source: e.into_error() })
}

pub fn anomaly_csv(report: &EvalReport) -> Result<Vec<u8>> {
    let rows = report
        .anomaly
        .iter()
        .map(|a| {
            let r = &a.report;
            vec![
                a.variant.model_id.clone(),
                a.variant.catalog_id.to_string(),
                a.variant.strategy_str().to_string(),
                a.variant.rejection_enabled.to_string(),
                r.tp.to_string(),
                r.fp.to_string(),
                r.fn_.to_string(),
                r.tn.to_string(),
                opt(r.precision),
                opt(r.recall),
                opt(r.f1),
                r.malformed_count.to_string(),
            ]
        })
        .collect();
    csv_bytes(
        &["model", "catalog", "strategy", "rejection", "tp", "fp", "fn", "tn", "precision", "recall", "f1", "malformed"],
        rows,
    )
}

pub fn selective_csv(report: &EvalReport) -> Result<Vec<u8>> {
    let mut rows = Vec::new();
    for s in &report.selective {
        for g in &s.report.groups {
            rows.push(vec![
                s.variant.model_id.clone(),
                s.variant.catalog_id.to_string(),
                s.variant.strategy_str().to_string(),
                s.variant.rejection_enabled.to_string(),
                s.kind.map(|k| k.as_str().to_string()).unwrap_or_else(|| "all".into()),
                s.report.group_key.to_string(),
                g.key.to_string(),
                g.n_total.to_string(),
                g.n_rejected.to_string(),
                g.n_malformed.to_string(),
                g.n_classified.to_string(),
                g.n_correct.to_string(),
                opt(g.accuracy_on_classified),
                opt(g.rejection_rate),
            ]);
        }
    }
    csv_bytes(
        &[
            "model", "catalog", "strategy", "rejection", "kind", "group_key", "group", "n_total", "n_rejected",
            "n_malformed", "n_classified", "n_correct", "accuracy_on_classified", "rejection_rate",
        ],
        rows,
    )
}

pub fn diversity_csv(report: &EvalReport) -> Result<Vec<u8>> {
    let mut rows = Vec::new();
    for d in &report.diversity {
        let split_groups: BTreeMap<u8, _> =
            d.split.iter().flat_map(|s| s.groups.iter().map(|g| (g.key, g))).collect();
        for g in &d.by_group {
            let s = split_groups.get(&g.key);
            rows.push(vec![
                d.model_id.clone(),
                d.embedding_model_id.clone(),
                d.group_key.to_string(),
                g.key.to_string(),
                g.n.to_string(),
                format!("{:.6}", g.mean),
                s.map(|s| s.n_rejected.to_string()).unwrap_or_default(),
                opt(s.and_then(|s| s.rejected_mean)),
                s.map(|s| s.n_classified.to_string()).unwrap_or_default(),
                opt(s.and_then(|s| s.classified_mean)),
            ]);
        }
    }
    csv_bytes(
        &[
            "model", "embedding_model", "group_key", "group", "n", "mean_score", "n_rejected", "rejected_mean",
            "n_classified", "classified_mean",
        ],
        rows,
    )
}

/// One polyline on a chart. Missing y values break the line.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, Option<f64>)>,
    pub dashed: bool,
    pub color: &'static str,
}

/// Static SVG line chart with a fixed layout.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (64.0, 170.0, 40.0, 56.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    let (x0, x1) = match (xs.iter().cloned().reduce(f64::min), xs.iter().cloned().reduce(f64::max)) {
        (Some(a), Some(b)) if b > a => (a, b),
        (Some(a), _) => (a - 1.0, a + 1.0),
        _ => (0.0, 1.0),
    };
    let ymax = series.iter().flat_map(|s| s.points.iter().filter_map(|p| p.1)).fold(1.0f64, f64::max);
    let y1 = if ymax > 1.0 { (ymax * 10.0).ceil() / 10.0 } else { 1.0 };
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - y / y1 * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#, left + pw / 2.0, xml(title));
    for i in 0..=5 {
        let y = y1 * i as f64 / 5.0;
        let py = sy(y);
        let _ = writeln!(s, r##"<line x1="{left:.1}" y1="{py:.1}" x2="{:.1}" y2="{py:.1}" stroke="#ddd"/>"##, left + pw);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{y:.2}</text>"#, left - 6.0, py + 4.0);
    }
    let ticks: BTreeSet<i64> = xs.iter().map(|x| (x * 1000.0).round() as i64).collect();
    for t in ticks {
        let x = t as f64 / 1000.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, sx(x), top + ph + 18.0, x);
    }
    let _ = writeln!(s, r#"<rect x="{left:.1}" y="{top:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="black"/>"#);
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, left + pw / 2.0, h - 14.0, xml(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        xml(y_label)
    );
    for (i, se) in series.iter().enumerate() {
        let dash = if se.dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let mut run: Vec<String> = Vec::new();
        let flush = |run: &mut Vec<String>, s: &mut String| {
            if run.len() > 1 {
                let _ = writeln!(s, r#"<polyline fill="none" stroke="{}" stroke-width="2"{dash} points="{}"/>"#, se.color, run.join(" "));
            }
            run.clear();
        };
        for (x, y) in &se.points {
            match y {
                Some(y) => {
                    run.push(format!("{:.1},{:.1}", sx(*x), sy(*y)));
                    let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{}"/>"#, sx(*x), sy(*y), se.color);
                }
                None => flush(&mut run, &mut s),
            }
        }
        flush(&mut run, &mut s);
        let ly = top + 12.0 + 20.0 * i as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(s, r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{}" stroke-width="2"{dash}/>"#, lx + 24.0, se.color);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, lx + 30.0, ly + 4.0, xml(&se.name));
    }
    s.push_str("</svg>\n");
    s
}

fn xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

type CurveKey = (String, CatalogId, Option<Strategy>, Option<CorruptionKind>);

/// Selective-classification charts: accuracy on classified samples with the
/// standard prompt (solid) and the rejection prompt (dashed), plus the
/// rejection rate under the rejection prompt.
pub fn selective_charts(report: &EvalReport) -> Vec<(String, String)> {
    let mut grouped: BTreeMap<CurveKey, Vec<&SelectiveRow>> = BTreeMap::new();
    for r in &report.selective {
        grouped
            .entry((r.variant.model_id.clone(), r.variant.catalog_id, r.variant.strategy, r.kind))
            .or_default()
            .push(r);
    }
    let mut out = Vec::new();
    for ((model, catalog, strategy, kind), rows) in grouped {
        let mut series = Vec::new();
        for r in &rows {
            let pts = |f: &dyn Fn(&crate::metrics::GroupStats) -> Option<f64>| {
                r.report.groups.iter().map(|g| (g.key as f64, f(g))).collect::<Vec<_>>()
            };
            let tag = if r.variant.rejection_enabled { "rejection prompt" } else { "standard prompt" };
            series.push(Series {
                name: format!("accuracy, {tag}"),
                points: pts(&|g| g.accuracy_on_classified),
                dashed: r.variant.rejection_enabled,
                color: "#1f77b4",
            });
            if r.variant.rejection_enabled {
                series.push(Series { name: "rejection rate".into(), points: pts(&|g| g.rejection_rate), dashed: true, color: "#d62728" });
            }
        }
        series.sort_by_key(|s| (s.dashed, s.name.clone()));
        let key = rows[0].report.group_key;
        let kind_s = kind.map(|k| k.as_str()).unwrap_or("all");
        let strat = strategy.map(|s| s.as_str()).unwrap_or("none");
        let title = format!("{model} / {catalog} / {strat} / {kind_s}");
        let file = sanitize(&format!("selective_{model}_{catalog}_{strat}_{kind_s}.svg"));
        out.push((file, line_chart(&title, key.as_str(), "fraction", &series)));
    }
    out
}

/// Diversity by group: all samples, rejected, classified.
pub fn diversity_charts(report: &EvalReport) -> Vec<(String, String)> {
    report
        .diversity
        .iter()
        .map(|d| {
            let mut series = vec![Series {
                name: "all samples".into(),
                points: d.by_group.iter().map(|g| (g.key as f64, Some(g.mean))).collect(),
                dashed: true,
                color: "#7f7f7f",
            }];
            if let Some(s) = &d.split {
                series.push(Series {
                    name: "rejected".into(),
                    points: s.groups.iter().map(|g| (g.key as f64, g.rejected_mean)).collect(),
                    dashed: false,
                    color: "#d62728",
                });
                series.push(Series {
                    name: "classified".into(),
                    points: s.groups.iter().map(|g| (g.key as f64, g.classified_mean)).collect(),
                    dashed: false,
                    color: "#1f77b4",
                });
            }
            let file = sanitize(&format!("diversity_{}.svg", d.model_id));
            (file, line_chart(&format!("caption diversity, {}", d.model_id), d.group_key.as_str(), "diversity score", &series))
        })
        .collect()
}

/// Writes `report.json`, the CSV tables and (optionally) SVG charts into
/// `dir`. Returns the written paths in a stable order.
pub fn write_report(dir: &Path, report: &EvalReport, plots: bool) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|source| ReportError::Io { path: dir.to_path_buf(), source })?;
    let mut files: Vec<(String, Vec<u8>)> = vec![
        ("report.json".into(), {
            let mut v = serde_json::to_vec_pretty(report).expect("report serializes");
            v.push(b'\n');
            v
        }),
        ("anomaly.csv".into(), anomaly_csv(report)?),
        ("selective.csv".into(), selective_csv(report)?),
        ("diversity.csv".into(), diversity_csv(report)?),
    ];
    if plots {
        for (name, svg) in selective_charts(report).into_iter().chain(diversity_charts(report)) {
            files.push((name, svg.into_bytes()));
        }
    }
    let mut written = Vec::new();
    for (name, bytes) in files {
        let path = dir.join(name);
        crate::fsutil::write_atomic(&path, &bytes).map_err(|source| ReportError::Io { path: path.clone(), source })?;
        written.push(path);
    }
    Ok(written)
}
