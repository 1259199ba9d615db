//! Evaluation metrics.
//!
//! Ratios whose denominator is zero are `None` (serialized as `null`), never
//! NaN and never silently 0 or 1. Malformed outputs are excluded from
//! accuracy and confusion counts and reported on their own.

use crate::corpus::{CorruptionKind, Truth};
use crate::parser::Outcome;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("no records")]
    Empty,
    #[error("need at least 2 vectors, got {0}")]
    TooFewVectors(usize),
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("vector {0} has zero norm")]
    ZeroNorm(usize),
    #[error("vector {0} has non-finite values")]
    NonFinite(usize),
    #[error("unknown group key {0:?}")]
    UnknownGroupKey(String),
    #[error("sample {0} has no value for the requested group key")]
    MissingGroupValue(String),
    #[error("sample {0} appears more than once")]
    DuplicateSample(String),
    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// A parsed model answer joined with the sample's ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredRecord {
    pub sample_id: String,
    pub truth: Truth,
    pub severity: u8,
    pub kind: Option<CorruptionKind>,
    pub ambiguity_bin: Option<u8>,
    pub outcome: Outcome,
}

impl ScoredRecord {
    pub fn is_correct(&self) -> bool {
        matches!((&self.outcome, &self.truth), (Outcome::Label(l), Truth::InLabelSpace(c)) if l == c)
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `2tp / (2tp + fp + fn)`, the harmonic mean of precision and recall
    /// wherever both exist. A never-rejecting model scores 0 when anomalies
    /// are present.
    pub fn f1(&self) -> Option<f64> {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn scores(&self) -> Prf {
        Prf { precision: self.precision(), recall: self.recall(), f1: self.f1() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

/// Rejection-as-detection scores. Anomalies are the positive class and a
/// rejection is a positive prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyReport {
    pub n_records: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub malformed_count: usize,
    /// Same scores with malformed outputs counted as not rejected.
    pub malformed_as_accepted: Prf,
}

pub fn anomaly_prf(records: &[ScoredRecord]) -> Result<AnomalyReport> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut c = Confusion::default();
    let mut with_malformed = Confusion::default();
    let mut malformed = 0;
    for r in records {
        let actual = r.truth.is_anomaly();
        let predicted = r.outcome.is_rejected();
        let slot = |c: &mut Confusion| match (predicted, actual) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        };
        slot(&mut with_malformed);
        if r.outcome.is_malformed() {
            malformed += 1;
        } else {
            slot(&mut c);
        }
    }
    let s = c.scores();
    Ok(AnomalyReport {
        n_records: records.len(),
        tp: c.tp,
        fp: c.fp,
        fn_: c.fn_,
        tn: c.tn,
        precision: s.precision,
        recall: s.recall,
        f1: s.f1,
        malformed_count: malformed,
        malformed_as_accepted: with_malformed.scores(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKey {
    #[default]
    Severity,
    AmbiguityBin,
}

impl GroupKey {
    pub fn as_str(self) -> &'static str {
        match self {
            GroupKey::Severity => "severity",
            GroupKey::AmbiguityBin => "ambiguity_bin",
        }
    }

    pub fn value(self, r: &ScoredRecord) -> Result<u8> {
        match self {
            GroupKey::Severity => Ok(r.severity),
            GroupKey::AmbiguityBin => r.ambiguity_bin.ok_or_else(|| MetricsError::MissingGroupValue(r.sample_id.clone())),
        }
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GroupKey {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "severity" => Ok(GroupKey::Severity),
            "ambiguity_bin" | "bin" => Ok(GroupKey::AmbiguityBin),
            other => Err(MetricsError::UnknownGroupKey(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub key: u8,
    pub n_total: usize,
    pub n_rejected: usize,
    pub n_malformed: usize,
    pub n_classified: usize,
    pub n_correct: usize,
    pub accuracy_on_classified: Option<f64>,
    pub rejection_rate: Option<f64>,
}

impl GroupStats {
    fn add(&mut self, r: &ScoredRecord) {
        self.n_total += 1;
        match &r.outcome {
            Outcome::Rejected => self.n_rejected += 1,
            Outcome::Malformed => self.n_malformed += 1,
            Outcome::Label(_) => {
                self.n_classified += 1;
                if r.is_correct() {
                    self.n_correct += 1;
                }
            }
        }
    }

    fn finish(&mut self) {
        self.accuracy_on_classified = ratio(self.n_correct, self.n_classified);
        self.rejection_rate = ratio(self.n_rejected, self.n_total);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectiveReport {
    pub group_key: GroupKey,
    /// One row per observed group value, ascending.
    pub groups: Vec<GroupStats>,
    pub overall: GroupStats,
}

impl SelectiveReport {
    pub fn group(&self, key: u8) -> Option<&GroupStats> {
        self.groups.iter().find(|g| g.key == key)
    }
}

pub fn selective_report(records: &[ScoredRecord], group_key: GroupKey) -> Result<SelectiveReport> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut groups: BTreeMap<u8, GroupStats> = BTreeMap::new();
    let mut overall = GroupStats::default();
    for r in records {
        let k = group_key.value(r)?;
        groups.entry(k).or_insert_with(|| GroupStats { key: k, ..Default::default() }).add(r);
        overall.add(r);
    }
    overall.finish();
    let groups = groups
        .into_values()
        .map(|mut g| {
            g.finish();
            g
        })
        .collect();
    Ok(SelectiveReport { group_key, groups, overall })
}

/// `u·v / sqrt(|u|²|v|²)`, clamped to [-1, 1]. Computing the norms under a
/// single square root makes `cosine(v, v)` exactly 1.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(MetricsError::DimMismatch(u.len(), v.len()));
    }
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 {
        return Err(MetricsError::ZeroNorm(0));
    }
    if nv == 0.0 {
        return Err(MetricsError::ZeroNorm(1));
    }
    Ok((dot / (nu * nv).sqrt()).clamp(-1.0, 1.0))
}

/// One minus the mean pairwise cosine similarity over all `k(k-1)/2` pairs.
pub fn caption_diversity<V: AsRef<[f64]>>(vectors: &[V]) -> Result<f64> {
    let k = vectors.len();
    if k < 2 {
        return Err(MetricsError::TooFewVectors(k));
    }
    let dim = vectors[0].as_ref().len();
    for (i, v) in vectors.iter().enumerate() {
        let v = v.as_ref();
        if v.len() != dim {
            return Err(MetricsError::DimMismatch(dim, v.len()));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(MetricsError::NonFinite(i));
        }
        if v.iter().all(|x| *x == 0.0) {
            return Err(MetricsError::ZeroNorm(i));
        }
    }
    let mut sum = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            sum += cosine(vectors[i].as_ref(), vectors[j].as_ref())?;
        }
    }
    let pairs = (k * (k - 1) / 2) as f64;
    Ok(1.0 - sum / pairs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityScore {
    pub sample_id: String,
    pub k: usize,
    pub score: f64,
    pub embedding_model_id: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiversityGroup {
    pub key: u8,
    pub n_rejected: usize,
    pub n_classified: usize,
    pub rejected_mean: Option<f64>,
    pub classified_mean: Option<f64>,
    pub all_mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversitySplit {
    pub n_rejected: usize,
    pub n_classified: usize,
    /// Joined samples whose classification was malformed.
    pub n_malformed: usize,
    pub rejected_mean: Option<f64>,
    pub classified_mean: Option<f64>,
    /// Scores with no matching classification record.
    pub unmatched_scores: usize,
    /// Classification records with no diversity score.
    pub unmatched_records: usize,
    pub group_key: GroupKey,
    pub groups: Vec<DiversityGroup>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Splits diversity scores by whether the sample was rejected in the
/// classification log. Ids present on only one side are dropped and counted.
/// All, rejected and classified scores of one group.
type ScoreLists = (Vec<f64>, Vec<f64>, Vec<f64>);

pub fn diversity_split(scores: &[DiversityScore], records: &[ScoredRecord], group_key: GroupKey) -> Result<DiversitySplit> {
    let mut by_id: HashMap<&str, &ScoredRecord> = HashMap::new();
    for r in records {
        if by_id.insert(&r.sample_id, r).is_some() {
            return Err(MetricsError::DuplicateSample(r.sample_id.clone()));
        }
    }
    let mut seen: HashMap<&str, ()> = HashMap::new();
    let (mut rej, mut cls) = (Vec::new(), Vec::new());
    let mut n_malformed = 0;
    let mut unmatched_scores = 0;
    let mut per: BTreeMap<u8, ScoreLists> = BTreeMap::new();
    for s in scores {
        if seen.insert(&s.sample_id, ()).is_some() {
            return Err(MetricsError::DuplicateSample(s.sample_id.clone()));
        }
        let Some(r) = by_id.get(s.sample_id.as_str()) else {
            unmatched_scores += 1;
            continue;
        };
        let g = per.entry(group_key.value(r)?).or_default();
        g.2.push(s.score);
        match r.outcome {
            Outcome::Rejected => {
                rej.push(s.score);
                g.0.push(s.score);
            }
            Outcome::Label(_) => {
                cls.push(s.score);
                g.1.push(s.score);
            }
            Outcome::Malformed => n_malformed += 1,
        }
    }
    let unmatched_records = records.iter().filter(|r| !seen.contains_key(r.sample_id.as_str())).count();
    let groups = per
        .into_iter()
        .map(|(key, (r, c, a))| DiversityGroup {
            key,
            n_rejected: r.len(),
            n_classified: c.len(),
            rejected_mean: mean(&r),
            classified_mean: mean(&c),
            all_mean: mean(&a),
        })
        .collect();
    Ok(DiversitySplit {
        n_rejected: rej.len(),
        n_classified: cls.len(),
        n_malformed,
        rejected_mean: mean(&rej),
        classified_mean: mean(&cls),
        unmatched_scores,
        unmatched_records,
        group_key,
        groups,
    })
}

/// Expected (precision, recall) of a rejector that ignores the input and
/// rejects with probability `reject_prob`.
pub fn random_baseline(n_pos: usize, n_neg: usize, reject_prob: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&reject_prob) {
        return Err(MetricsError::InvalidProbability(reject_prob));
    }
    if n_pos + n_neg == 0 {
        return Err(MetricsError::Empty);
    }
    Ok((n_pos as f64 / (n_pos + n_neg) as f64, reject_prob))
}

/// Records for `n_in` in-space and `n_anom` anomalous samples, each rejected
/// independently with probability `reject_prob`. Accepted samples get their
/// true class (anomalies get the placeholder label `accepted`).
pub fn simulate_random_rejector(n_in: usize, n_anom: usize, reject_prob: f64, seed: u64) -> Result<Vec<ScoredRecord>> {
    if !(0.0..=1.0).contains(&reject_prob) {
        return Err(MetricsError::InvalidProbability(reject_prob));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_in + n_anom)
        .map(|i| {
            let truth = if i < n_in { Truth::InLabelSpace("in_space".into()) } else { Truth::Anomaly };
            let outcome = if rng.random_bool(reject_prob) {
                Outcome::Rejected
            } else {
                Outcome::Label(truth.class_name().unwrap_or("accepted").to_string())
            };
            ScoredRecord { sample_id: format!("sim-{i:06}"), truth, severity: 0, kind: None, ambiguity_bin: None, outcome }
        })
        .collect())
}
