//! Quality scoring, rule filtering and category balancing of training
//! records, plus the high-dependency subset used by the second stage.

use crate::judge::{JudgeError, RemoteJudger, Transport, WireRequest};
use crate::world::{ContentStore, Modality, TaskTemplate};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

/// Slack used when comparing scores against thresholds.
const SCORE_TOLERANCE: f64 = 1e-12;

pub const OTHER_LABEL: &str = "other";

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("only {surviving} categories survive pruning; balancing needs at least 2")]
    DegenerateTaxonomy { surviving: usize },
    #[error("invalid curation config: {0}")]
    InvalidConfig(String),
}

/// One record of a curation manifest. Scores are absent until scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub content_ref: String,
    pub question: String,
    pub reference_answer: String,
    pub duration: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_v: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_q: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub s_v: f64,
    pub s_a: f64,
    pub s_q: f64,
    pub s_r: f64,
    pub s_c: f64,
}

impl SampleRecord {
    pub fn unscored(
        id: impl Into<String>,
        content_ref: impl Into<String>,
        question: impl Into<String>,
        reference_answer: impl Into<String>,
        duration: f64,
    ) -> Self {
        Self {
            id: id.into(),
            content_ref: content_ref.into(),
            question: question.into(),
            reference_answer: reference_answer.into(),
            duration,
            s_v: None,
            s_a: None,
            s_q: None,
            s_r: None,
            s_c: None,
            category: None,
        }
    }

    pub fn scores(&self) -> Option<Scores> {
        Some(Scores {
            s_v: self.s_v?,
            s_a: self.s_a?,
            s_q: self.s_q?,
            s_r: self.s_r?,
            s_c: self.s_c?,
        })
    }

    /// Sets the four dimension scores and the weighted composite.
    pub fn set_scores(&mut self, dims: [f64; 4], weights: &[f64; 4]) {
        self.s_v = Some(dims[0]);
        self.s_a = Some(dims[1]);
        self.s_q = Some(dims[2]);
        self.s_r = Some(dims[3]);
        self.s_c = Some(composite_score(dims, weights));
    }

    pub fn field(&self, field: ScoreField) -> Option<f64> {
        match field {
            ScoreField::SV => self.s_v,
            ScoreField::SA => self.s_a,
            ScoreField::SQ => self.s_q,
            ScoreField::SR => self.s_r,
            ScoreField::SC => self.s_c,
        }
    }

    fn validate(&self) -> Result<(), String> {
        if !self.duration.is_finite() || self.duration < 0.0 {
            return Err(format!("duration {} is not a non-negative number", self.duration));
        }
        let present = [self.s_v, self.s_a, self.s_q, self.s_r, self.s_c];
        let n = present.iter().filter(|s| s.is_some()).count();
        if n != 0 && n != present.len() {
            return Err("scores must be all present or all absent".into());
        }
        if present.iter().flatten().any(|s| !(0.0..=1.0).contains(s)) {
            return Err("scores must lie in [0, 1]".into());
        }
        Ok(())
    }
}

pub fn composite_score(dims: [f64; 4], weights: &[f64; 4]) -> f64 {
    dims.iter().zip(weights).map(|(s, w)| s * w).sum::<f64>().clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    VideoDependency,
    AudioDependency,
    QuestionLogic,
    ResponseAccuracy,
}

impl Dimension {
    pub const ALL: [Dimension; 4] = [
        Dimension::VideoDependency,
        Dimension::AudioDependency,
        Dimension::QuestionLogic,
        Dimension::ResponseAccuracy,
    ];

    pub fn wire_kind(self) -> &'static str {
        match self {
            Dimension::VideoDependency => "video_dependency",
            Dimension::AudioDependency => "audio_dependency",
            Dimension::QuestionLogic => "question_logic",
            Dimension::ResponseAccuracy => "response_accuracy",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScoreField {
    #[serde(rename = "s_v")]
    SV,
    #[serde(rename = "s_a")]
    SA,
    #[serde(rename = "s_q")]
    SQ,
    #[serde(rename = "s_r")]
    SR,
    #[serde(rename = "s_c")]
    SC,
}

fn default_taxonomy() -> Vec<String> {
    [
        "event-order",
        "reverse-order",
        "sound-sequence",
        "sound-history",
        "audio-visual-sync",
        "source-identification",
        "counting",
        "object-attributes",
        "action-recognition",
        "scene-context",
        "speech-content",
        "music-analysis",
        "emotion",
        "causal-reasoning",
        "spatial-relation",
        "summary",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn default_template_labels() -> BTreeMap<String, String> {
    TaskTemplate::ALL
        .iter()
        .zip(default_taxonomy())
        .map(|(t, l)| (t.slug().to_string(), l))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurationConfig {
    /// Weights of (s_v, s_a, s_q, s_r) in the composite s_c.
    pub weights: [f64; 4],
    pub min_s_r: f64,
    pub min_s_q: f64,
    pub min_s_c: f64,
    pub min_category_count: usize,
    pub cap_ratio: f64,
    /// Records with every listed score equal to 1 survive trimming.
    pub must_keep: Vec<ScoreField>,
    /// Trim every category above the cap, not only the largest.
    pub global_cap: bool,
    pub stage2_min_v: f64,
    pub stage2_min_a: f64,
    pub taxonomy: Vec<String>,
    /// Oracle classifier: task template slug to label.
    pub template_labels: BTreeMap<String, String>,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            weights: [0.25; 4],
            min_s_r: 1.0,
            min_s_q: 0.8,
            min_s_c: 0.7,
            min_category_count: 10,
            cap_ratio: 3.0,
            must_keep: vec![ScoreField::SA, ScoreField::SV],
            global_cap: false,
            stage2_min_v: 0.7,
            stage2_min_a: 0.7,
            taxonomy: default_taxonomy(),
            template_labels: default_template_labels(),
        }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<(), CurationError> {
        let bad = |m: String| Err(CurationError::InvalidConfig(m));
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return bad("weights must be non-negative".into());
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("weights sum to {sum}, not 1"));
        }
        if !(self.cap_ratio >= 1.0) {
            return bad("cap_ratio must be >= 1".into());
        }
        if self.taxonomy.is_empty() {
            return bad("taxonomy is empty".into());
        }
        for label in self.template_labels.values() {
            if label != OTHER_LABEL && !self.taxonomy.contains(label) {
                return bad(format!("template label '{label}' is not in the taxonomy"));
            }
        }
        Ok(())
    }

    fn normalize_label(&self, label: &str) -> String {
        let label = label.trim();
        self.taxonomy
            .iter()
            .find(|t| t.eq_ignore_ascii_case(label))
            .cloned()
            .unwrap_or_else(|| OTHER_LABEL.to_string())
    }

    fn must_keep(&self, r: &SampleRecord) -> bool {
        self.must_keep
            .iter()
            .all(|f| r.field(*f).is_some_and(|s| s >= 1.0 - SCORE_TOLERANCE))
    }
}

/// Scorer and classifier used by the pipeline.
pub trait CurationJudge: Send + Sync {
    fn score_dimension(&self, record: &SampleRecord, dim: Dimension) -> Result<f64, JudgeError>;
    fn categorize(&self, record: &SampleRecord, taxonomy: &[String]) -> Result<String, JudgeError>;
}

/// Exact scorer over the symbolic world.
///
/// Dependency scores come from the task's modality requirement, question
/// logic is 1 for generated templates, and response accuracy checks the
/// dataset label against the answer key.
#[derive(Debug, Clone)]
pub struct OracleCurator {
    store: Arc<ContentStore>,
    template_labels: BTreeMap<String, String>,
}

impl OracleCurator {
    pub fn new(store: Arc<ContentStore>, config: &CurationConfig) -> Self {
        Self { store, template_labels: config.template_labels.clone() }
    }
}

impl CurationJudge for OracleCurator {
    fn score_dimension(&self, record: &SampleRecord, dim: Dimension) -> Result<f64, JudgeError> {
        let task = self.store.task(&record.content_ref)?;
        let needs = |m: Modality| task.modality_requirement == m || task.modality_requirement == Modality::AV;
        Ok(match dim {
            Dimension::VideoDependency => f64::from(u8::from(needs(Modality::V))),
            Dimension::AudioDependency => f64::from(u8::from(needs(Modality::A))),
            Dimension::QuestionLogic => 1.0,
            Dimension::ResponseAccuracy => {
                f64::from(u8::from(record.reference_answer.trim() == task.answer_key))
            }
        })
    }

    fn categorize(&self, record: &SampleRecord, _taxonomy: &[String]) -> Result<String, JudgeError> {
        let task = self.store.task(&record.content_ref)?;
        Ok(self
            .template_labels
            .get(task.template.slug())
            .cloned()
            .unwrap_or_else(|| OTHER_LABEL.to_string()))
    }
}

impl<T: Transport> CurationJudge for RemoteJudger<T> {
    fn score_dimension(&self, record: &SampleRecord, dim: Dimension) -> Result<f64, JudgeError> {
        let req = WireRequest {
            kind: dim.wire_kind().into(),
            content_ref: record.content_ref.clone(),
            question: Some(record.question.clone()),
            reference: Some(record.reference_answer.clone()),
            template_id: format!("{}-v1", dim.wire_kind()),
            ..Default::default()
        };
        Ok(self.call_score(&req)?.value)
    }

    fn categorize(&self, record: &SampleRecord, taxonomy: &[String]) -> Result<String, JudgeError> {
        let req = WireRequest {
            kind: "categorize".into(),
            content_ref: record.content_ref.clone(),
            question: Some(record.question.clone()),
            template_id: "categorize-v1".into(),
            taxonomy: Some(taxonomy.to_vec()),
            ..Default::default()
        };
        self.call(&req)?
            .label
            .ok_or_else(|| JudgeError::Protocol("categorize reply lacks a label".into()))
    }
}

/// Scores all four dimensions and the composite.
pub fn score_sample(
    record: &SampleRecord,
    judge: &dyn CurationJudge,
    cfg: &CurationConfig,
) -> Result<SampleRecord, JudgeError> {
    let mut dims = [0.0; 4];
    for (slot, dim) in dims.iter_mut().zip(Dimension::ALL) {
        *slot = judge.score_dimension(record, dim)?.clamp(0.0, 1.0);
    }
    let mut out = record.clone();
    out.set_scores(dims, &cfg.weights);
    Ok(out)
}

/// Label from the configured taxonomy; anything else, including judge
/// failure, becomes [`OTHER_LABEL`].
pub fn categorize(record: &SampleRecord, judge: &dyn CurationJudge, cfg: &CurationConfig) -> String {
    match judge.categorize(record, &cfg.taxonomy) {
        Ok(label) => cfg.normalize_label(&label),
        Err(e) => {
            log::warn!("categorize {} failed: {e}", record.id);
            OTHER_LABEL.to_string()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub id: String,
    pub stage: String,
    pub rule: String,
}

impl AuditEntry {
    fn new(id: &str, stage: &str, rule: impl Into<String>) -> Self {
        Self { id: id.into(), stage: stage.into(), rule: rule.into() }
    }
}

fn filter_violation(r: &SampleRecord, cfg: &CurationConfig) -> Option<&'static str> {
    let Some(s) = r.scores() else {
        return Some("unscored");
    };
    if s.s_r < cfg.min_s_r - SCORE_TOLERANCE {
        Some("s_r")
    } else if s.s_q < cfg.min_s_q - SCORE_TOLERANCE {
        Some("s_q")
    } else if s.s_c < cfg.min_s_c - SCORE_TOLERANCE {
        Some("s_c")
    } else {
        None
    }
}

pub fn quality_filter(records: &[SampleRecord], cfg: &CurationConfig) -> Vec<SampleRecord> {
    quality_filter_audited(records, cfg).0
}

/// Rule filter that also reports the first violated rule of each discard.
pub fn quality_filter_audited(
    records: &[SampleRecord],
    cfg: &CurationConfig,
) -> (Vec<SampleRecord>, Vec<AuditEntry>) {
    let mut kept = Vec::new();
    let mut audit = Vec::new();
    for r in records {
        match filter_violation(r, cfg) {
            None => kept.push(r.clone()),
            Some(rule) => audit.push(AuditEntry::new(&r.id, "filter", rule)),
        }
    }
    (kept, audit)
}

pub fn balance_categories(
    records: &[SampleRecord],
    cfg: &CurationConfig,
) -> Result<Vec<SampleRecord>, CurationError> {
    Ok(balance_categories_audited(records, cfg)?.0)
}

/// Prunes sparse categories and caps the dominant one.
///
/// Output is sorted by id.
pub fn balance_categories_audited(
    records: &[SampleRecord],
    cfg: &CurationConfig,
) -> Result<(Vec<SampleRecord>, Vec<AuditEntry>), CurationError> {
    let mut groups: BTreeMap<&str, Vec<&SampleRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.category.as_deref().unwrap_or(OTHER_LABEL)).or_default().push(r);
    }
    let mut audit = Vec::new();
    groups.retain(|label, members| {
        let keep = members.len() >= cfg.min_category_count;
        if !keep {
            audit.extend(members.iter().map(|r| AuditEntry::new(&r.id, "balance", format!("sparse category {label}"))));
        }
        keep
    });
    if groups.len() < 2 {
        return Err(CurationError::DegenerateTaxonomy { surviving: groups.len() });
    }
    let mut by_size: Vec<(&str, usize)> = groups.iter().map(|(l, m)| (*l, m.len())).collect();
    by_size.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let cap = (cfg.cap_ratio * by_size[1].1 as f64).floor() as usize;
    let trimmed: Vec<&str> = if cfg.global_cap {
        by_size.iter().filter(|(_, n)| *n > cap).map(|(l, _)| *l).collect()
    } else {
        vec![by_size[0].0]
    };
    let mut out = Vec::new();
    for (label, members) in groups {
        if !trimmed.contains(&label) || members.len() <= cap {
            out.extend(members.into_iter().cloned());
            continue;
        }
        let (must, mut rest): (Vec<&SampleRecord>, Vec<&SampleRecord>) =
            members.into_iter().partition(|r| cfg.must_keep(r));
        rest.sort_by(|a, b| {
            b.s_c.unwrap_or(0.0).total_cmp(&a.s_c.unwrap_or(0.0)).then_with(|| a.id.cmp(&b.id))
        });
        let fill = cap.saturating_sub(must.len()).min(rest.len());
        for r in &rest[fill..] {
            audit.push(AuditEntry::new(&r.id, "balance", format!("over cap {cap} in {label}")));
        }
        out.extend(must.into_iter().cloned());
        out.extend(rest[..fill].iter().map(|r| (*r).clone()));
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok((out, audit))
}

pub fn stage2_subset(records: &[SampleRecord], cfg: &CurationConfig) -> Vec<SampleRecord> {
    records
        .iter()
        .filter(|r| {
            r.s_v.is_some_and(|v| v >= cfg.stage2_min_v - SCORE_TOLERANCE)
                && r.s_a.is_some_and(|a| a >= cfg.stage2_min_a - SCORE_TOLERANCE)
        })
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurationOutput {
    pub stage1: Vec<SampleRecord>,
    pub stage2: Vec<SampleRecord>,
    /// Stage-1 count per category.
    pub histogram: BTreeMap<String, usize>,
    pub audit: Vec<AuditEntry>,
}

#[cfg(feature = "parallel")]
fn map_records<F, T>(records: &[SampleRecord], f: F) -> Vec<T>
where
    F: Fn(&SampleRecord) -> T + Sync + Send,
    T: Send,
{
    use rayon::prelude::*;
    records.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_records<F, T>(records: &[SampleRecord], f: F) -> Vec<T>
where
    F: Fn(&SampleRecord) -> T,
{
    records.iter().map(f).collect()
}

/// Score, categorize, filter, balance, then take the stage-2 subset.
pub fn run_pipeline(
    records: &[SampleRecord],
    judge: &dyn CurationJudge,
    cfg: &CurationConfig,
) -> Result<CurationOutput, CurationError> {
    cfg.validate()?;
    let mut audit = Vec::new();
    let scored = map_records(records, |r| {
        score_sample(r, judge, cfg).map(|mut s| {
            s.category = Some(categorize(&s, judge, cfg));
            s
        })
    });
    let mut kept = Vec::new();
    for (r, result) in records.iter().zip(scored) {
        match result {
            Ok(s) => kept.push(s),
            Err(e) => {
                log::warn!("record {} left unscored: {e}", r.id);
                audit.push(AuditEntry::new(&r.id, "score", format!("unscored: {e}")));
            }
        }
    }
    let (filtered, filter_audit) = quality_filter_audited(&kept, cfg);
    audit.extend(filter_audit);
    let (stage1, balance_audit) = balance_categories_audited(&filtered, cfg)?;
    audit.extend(balance_audit);
    let stage2 = stage2_subset(&stage1, cfg);
    for r in &stage1 {
        if !stage2.iter().any(|s| s.id == r.id) {
            audit.push(AuditEntry::new(&r.id, "stage2", "dependency below threshold"));
        }
    }
    let mut histogram = BTreeMap::new();
    for r in &stage1 {
        *histogram.entry(r.category.clone().unwrap_or_else(|| OTHER_LABEL.into())).or_insert(0) += 1;
    }
    Ok(CurationOutput { stage1, stage2, histogram, audit })
}

/// Writes records as JSON lines sorted by id.
pub fn write_manifest(records: &[SampleRecord], path: &Path) -> Result<(), CurationError> {
    let mut sorted: Vec<&SampleRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in sorted {
        writeln!(f, "{}", serde_json::to_string(r).expect("serializable record"))?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<SampleRecord>, CurationError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    let mut ids: HashMap<String, usize> = HashMap::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| CurationError::Manifest { line: lineno, message };
        let r: SampleRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        r.validate().map_err(err)?;
        if let Some(prev) = ids.insert(r.id.clone(), lineno) {
            return Err(err(format!("duplicate id {} (first on line {prev})", r.id)));
        }
        out.push(r);
    }
    Ok(out)
}

/// Checks that every composite score matches the configured weights.
pub fn check_composites(records: &[SampleRecord], cfg: &CurationConfig) -> Result<(), String> {
    for r in records {
        if let Some(s) = r.scores() {
            let expect = composite_score([s.s_v, s.s_a, s.s_q, s.s_r], &cfg.weights);
            if (expect - s.s_c).abs() > 1e-9 {
                return Err(format!("record {}: s_c {} != weighted sum {expect}", r.id, s.s_c));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, cat: &str, dims: [f64; 4]) -> SampleRecord {
        let mut r = SampleRecord::unscored(id, id, "q", "A", 30.0);
        r.set_scores(dims, &[0.25; 4]);
        r.category = Some(cat.into());
        r
    }

    #[test]
    fn composite_uses_weights() {
        let r = rec("a", "x", [1.0, 1.0, 0.8, 0.6]);
        assert!((r.s_c.unwrap() - 0.85).abs() < 1e-12);
    }

    #[test]
    fn filter_boundaries() {
        let cfg = CurationConfig::default();
        let mut edge = rec("edge", "x", [0.0, 0.0, 0.8, 1.0]);
        edge.s_c = Some(0.7);
        let mut low_r = rec("r", "x", [1.0, 1.0, 1.0, 0.99]);
        low_r.s_c = Some(0.99);
        let mut low_q = rec("q", "x", [1.0, 1.0, 0.79, 1.0]);
        low_q.s_c = Some(0.9);
        let unscored = SampleRecord::unscored("u", "u", "q", "A", 1.0);
        let (kept, audit) = quality_filter_audited(&[edge, low_r, low_q, unscored], &cfg);
        assert_eq!(kept.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), ["edge"]);
        let rules: Vec<&str> = audit.iter().map(|a| a.rule.as_str()).collect();
        assert_eq!(rules, ["s_r", "s_q", "unscored"]);
    }

    fn category(prefix: &str, n: usize, must: usize) -> Vec<SampleRecord> {
        (0..n)
            .map(|i| {
                let dims = if i < must { [1.0, 1.0, 1.0, 1.0] } else { [0.5, 1.0, 1.0, 1.0] };
                let mut r = rec(&format!("{prefix}{i:03}"), prefix, dims);
                if i >= must {
                    // spread composites so the fill order is visible
                    r.s_c = Some(0.5 + i as f64 / 1000.0);
                }
                r
            })
            .collect()
    }

    #[test]
    fn balance_hand_trace() {
        let cfg = CurationConfig::default();
        let mut all = category("A", 40, 12);
        all.extend(category("B", 10, 0));
        all.extend(category("C", 9, 0));
        let out = balance_categories(&all, &cfg).unwrap();
        let count = |p: &str| out.iter().filter(|r| r.category.as_deref() == Some(p)).count();
        assert_eq!((count("A"), count("B"), count("C")), (30, 10, 0));
        // all 12 must-keep plus the 18 highest composites among the rest
        let a_ids: Vec<&str> = out.iter().filter(|r| r.id.starts_with('A')).map(|r| r.id.as_str()).collect();
        assert!((0..12).all(|i| a_ids.contains(&format!("A{i:03}").as_str())));
        assert!((22..40).all(|i| a_ids.contains(&format!("A{i:03}").as_str())));
    }

    #[test]
    fn must_keep_dominates_cap() {
        let mut all = category("A", 40, 35);
        all.extend(category("B", 10, 0));
        let out = balance_categories(&all, &CurationConfig::default()).unwrap();
        assert_eq!(out.iter().filter(|r| r.id.starts_with('A')).count(), 35);
    }

    #[test]
    fn inactive_cap_and_degenerate_taxonomy() {
        let mut all = category("A", 25, 0);
        all.extend(category("B", 10, 0));
        assert_eq!(balance_categories(&all, &CurationConfig::default()).unwrap().len(), 35);
        let lone = category("A", 25, 0);
        assert!(matches!(
            balance_categories(&lone, &CurationConfig::default()),
            Err(CurationError::DegenerateTaxonomy { surviving: 1 })
        ));
    }

    #[test]
    fn global_cap_trims_every_large_category() {
        let mut all = category("A", 40, 0);
        all.extend(category("B", 35, 0));
        all.extend(category("C", 10, 0));
        let cfg = CurationConfig { global_cap: true, ..CurationConfig::default() };
        let out = balance_categories(&all, &cfg).unwrap();
        let count = |p: char| out.iter().filter(|r| r.id.starts_with(p)).count();
        assert_eq!((count('A'), count('B'), count('C')), (40, 35, 10));
        let mut all = category("A", 80, 0);
        all.extend(category("B", 70, 0));
        all.extend(category("C", 20, 0));
        let out = balance_categories(&all, &CurationConfig { cap_ratio: 1.0, global_cap: true, ..cfg }).unwrap();
        let count = |p: char| out.iter().filter(|r| r.id.starts_with(p)).count();
        assert_eq!((count('A'), count('B'), count('C')), (70, 70, 20));
    }

    #[test]
    fn stage2_thresholds() {
        let cfg = CurationConfig::default();
        let recs = [
            rec("keep", "x", [0.7, 0.7, 1.0, 1.0]),
            rec("drop", "x", [0.9, 0.6, 1.0, 1.0]),
        ];
        let out = stage2_subset(&recs, &cfg);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].id, "keep");
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let recs = vec![rec("b", "x", [1.0, 0.0, 1.0, 1.0]), SampleRecord::unscored("a", "a", "q?", "B", 12.0)];
        write_manifest(&recs, &path).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].id, "a");
        assert_eq!(back[1], recs[0]);

        std::fs::write(&path, "").unwrap();
        assert!(read_manifest(&path).unwrap().is_empty());

        let good = serde_json::to_string(&recs[1]).unwrap();
        std::fs::write(&path, format!("{good}\n{{\"id\": 3}}\n")).unwrap();
        assert!(matches!(read_manifest(&path), Err(CurationError::Manifest { line: 2, .. })));
        std::fs::write(&path, format!("{good}\n{}\n", good.replace("12.0", "12.0,\"s_v\":2.0"))).unwrap();
        assert!(matches!(read_manifest(&path), Err(CurationError::Manifest { line: 2, .. })));
    }

    #[test]
    fn oracle_scoring_of_generated_tasks() {
        use crate::world::{export_manifest, generate_corpus, GenParams};
        let params = GenParams { n_tasks: 30, ..GenParams::default() };
        let tasks = generate_corpus(3, &params).unwrap();
        let cfg = CurationConfig::default();
        let store = Arc::new(ContentStore::new(tasks.clone()));
        let judge = OracleCurator::new(store, &cfg);
        for (t, r) in tasks.iter().zip(export_manifest(&tasks)) {
            let s = score_sample(&r, &judge, &cfg).unwrap().scores().unwrap();
            match t.modality_requirement {
                Modality::AV => assert_eq!((s.s_v, s.s_a), (1.0, 1.0)),
                Modality::V => assert_eq!((s.s_v, s.s_a), (1.0, 0.0)),
                Modality::A => assert_eq!((s.s_v, s.s_a), (0.0, 1.0)),
            }
            assert_eq!(s.s_r, 1.0);
            let label = categorize(&r, &judge, &cfg);
            assert_eq!(label, cfg.template_labels[t.template.slug()]);
            assert_eq!(label, categorize(&r, &judge, &cfg));
        }
    }

    struct Labeler(&'static str);

    impl CurationJudge for Labeler {
        fn score_dimension(&self, _: &SampleRecord, _: Dimension) -> Result<f64, JudgeError> {
            Ok(1.0)
        }
        fn categorize(&self, _: &SampleRecord, _: &[String]) -> Result<String, JudgeError> {
            if self.0.is_empty() {
                Err(JudgeError::Unavailable { attempts: 3, last: "timeout".into() })
            } else {
                Ok(self.0.into())
            }
        }
    }

    #[test]
    fn unknown_labels_become_other() {
        let cfg = CurationConfig::default();
        let r = SampleRecord::unscored("a", "a", "q", "A", 1.0);
        assert_eq!(categorize(&r, &Labeler("made-up"), &cfg), OTHER_LABEL);
        assert_eq!(categorize(&r, &Labeler("Counting"), &cfg), "counting");
        assert_eq!(categorize(&r, &Labeler(""), &cfg), OTHER_LABEL);
    }
}
