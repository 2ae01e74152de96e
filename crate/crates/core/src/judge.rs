//! Soft evaluators for grounding consistency, grounding completeness and
//! answer quality.
//!
//! Two interchangeable backends implement [`Judger`]: [`OracleJudger`]
//! scores exactly against symbolic content, [`RemoteJudger`] speaks the
//! JSON wire protocol to an external judge model.

use crate::interval::{CompositeContentRef, CropDirective, IntervalError, SegmentSet, TimeSpan};
use crate::util::json_digest;
use crate::world::{solve, ContentStore, WorldError, AUDIO_VOCAB, OPTION_LETTERS, VISUAL_VOCAB};
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum JudgeError {
    #[error("judge unavailable after {attempts} attempts: {last}")]
    Unavailable { attempts: usize, last: String },
    #[error("content not found: {0}")]
    ContentNotFound(String),
    #[error("malformed judge reply: {0}")]
    Protocol(String),
    #[error(transparent)]
    Span(#[from] IntervalError),
    #[error("invalid rule set: {0}")]
    InvalidRules(String),
}

impl From<WorldError> for JudgeError {
    fn from(e: WorldError) -> Self {
        match e {
            WorldError::ContentNotFound(r) => JudgeError::ContentNotFound(r),
            other => JudgeError::ContentNotFound(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeScore {
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
}

impl JudgeScore {
    /// Clamps into `[0, 1]`; NaN becomes 0.
    pub fn new(value: f64) -> Self {
        let value = if value.is_nan() { 0.0 } else { value.clamp(0.0, 1.0) };
        Self { value, rationale: None }
    }

    pub fn with_rationale(mut self, rationale: impl Into<String>) -> Self {
        self.rationale = Some(rationale.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    pub id: String,
    pub weight: f64,
    pub template: String,
}

/// Ordered scoring rules with non-negative weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Rule>", into = "Vec<Rule>")]
pub struct RuleSet {
    rules: Vec<Rule>,
}

impl TryFrom<Vec<Rule>> for RuleSet {
    type Error = JudgeError;

    fn try_from(rules: Vec<Rule>) -> Result<Self, Self::Error> {
        RuleSet::new(rules)
    }
}

impl From<RuleSet> for Vec<Rule> {
    fn from(r: RuleSet) -> Self {
        r.rules
    }
}

impl RuleSet {
    pub fn new(rules: Vec<Rule>) -> Result<Self, JudgeError> {
        if rules.is_empty() {
            return Err(JudgeError::InvalidRules("empty rule set".into()));
        }
        if rules.iter().any(|r| !r.weight.is_finite() || r.weight < 0.0) {
            return Err(JudgeError::InvalidRules("negative or non-finite weight".into()));
        }
        let total: f64 = rules.iter().map(|r| r.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(JudgeError::InvalidRules(format!("weights sum to {total}, not 1")));
        }
        Ok(Self { rules })
    }

    fn uniform(rules: &[(&str, &str)]) -> Self {
        let w = 1.0 / rules.len() as f64;
        Self {
            rules: rules
                .iter()
                .map(|(id, t)| Rule { id: id.to_string(), weight: w, template: t.to_string() })
                .collect(),
        }
    }

    /// Default consistency rules (L = 3).
    pub fn default_consistency() -> Self {
        Self::uniform(&[
            ("temporal-alignment", "Every event named in the caption happens inside the clip."),
            ("no-hallucination", "The caption names no event that is absent from the clip."),
            ("specificity", "The caption names concrete visual or sound events rather than vague summaries."),
        ])
    }

    /// Default completeness rules (M = 3).
    pub fn default_completeness() -> Self {
        Self::uniform(&[
            ("sufficiency", "The clips contain every event needed to answer the question."),
            ("precision", "The clips contain as little footage unrelated to the question as possible."),
            ("answerability", "Watching only the clips, one can derive the given answer from the question."),
        ])
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn weight(&self, id: &str) -> f64 {
        self.rules.iter().filter(|r| r.id == id).map(|r| r.weight).sum()
    }

    pub fn templates(&self) -> Vec<String> {
        self.rules.iter().map(|r| r.template.clone()).collect()
    }
}

/// A judge backend. Implementations are shared across worker threads.
pub trait Judger: Send + Sync {
    fn consistency(
        &self,
        content_ref: &str,
        span: TimeSpan,
        caption: &str,
        rules: &RuleSet,
    ) -> Result<JudgeScore, JudgeError>;

    fn completeness(
        &self,
        composite: &CompositeContentRef,
        question: &str,
        final_answer: &str,
        rules: &RuleSet,
    ) -> Result<JudgeScore, JudgeError>;

    /// Free-text answer quality.
    fn answer_text(&self, question: &str, prediction: &str, reference: &str) -> Result<JudgeScore, JudgeError>;
}

pub fn judge_consistency(
    judger: &dyn Judger,
    content_ref: &str,
    span: TimeSpan,
    caption: &str,
    rules: &RuleSet,
) -> Result<JudgeScore, JudgeError> {
    judger.consistency(content_ref, span, caption, rules)
}

pub fn judge_completeness(
    judger: &dyn Judger,
    composite: &CompositeContentRef,
    question: &str,
    final_answer: &str,
    rules: &RuleSet,
) -> Result<JudgeScore, JudgeError> {
    judger.completeness(composite, question, final_answer, rules)
}

/// Multiple-choice answers are matched locally; free text goes to the backend.
pub fn judge_answer(
    judger: &dyn Judger,
    question: &str,
    prediction: &str,
    reference: &str,
    options: Option<&[String]>,
) -> Result<JudgeScore, JudgeError> {
    match options {
        Some(options) => Ok(judge_answer_choice(prediction, reference, options)),
        None => judger.answer_text(question, prediction, reference),
    }
}

/// Resolves a multiple-choice reply to an option index.
///
/// Accepts a bare letter with optional brackets or trailing punctuation
/// (`B`, `b)`, `(C)`, `D. text`) or the exact option text.
pub fn normalize_choice(answer: &str, options: &[String]) -> Option<usize> {
    let trimmed = answer.trim();
    let stripped = trimmed.trim_start_matches(['(', '[']);
    let mut chars = stripped.chars();
    if let Some(first) = chars.next() {
        let boundary = chars.next().is_none_or(|c| !c.is_alphanumeric());
        if first.is_ascii_alphabetic() && boundary {
            let idx = (first.to_ascii_uppercase() as u8 - b'A') as usize;
            if idx < options.len().max(1).min(OPTION_LETTERS.len().max(options.len())) {
                return Some(idx);
            }
        }
    }
    options
        .iter()
        .position(|o| o.trim().eq_ignore_ascii_case(trimmed))
}

pub fn judge_answer_choice(prediction: &str, reference: &str, options: &[String]) -> JudgeScore {
    match (normalize_choice(prediction, options), normalize_choice(reference, options)) {
        (Some(p), Some(r)) if p == r => JudgeScore::new(1.0),
        _ => JudgeScore::new(0.0),
    }
}

fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '-'))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Token-set F1 between two texts.
pub fn token_f1(prediction: &str, reference: &str) -> f64 {
    let p: HashSet<String> = tokens(prediction).into_iter().collect();
    let r: HashSet<String> = tokens(reference).into_iter().collect();
    if p.is_empty() && r.is_empty() {
        return 1.0;
    }
    let common = p.intersection(&r).count() as f64;
    if common == 0.0 {
        return 0.0;
    }
    let precision = common / p.len() as f64;
    let recall = common / r.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Exact judge over the symbolic world.
#[derive(Debug, Clone)]
pub struct OracleJudger {
    store: Arc<ContentStore>,
}

impl OracleJudger {
    pub fn new(store: Arc<ContentStore>) -> Self {
        Self { store }
    }

    pub fn store(&self) -> &ContentStore {
        &self.store
    }
}

/// Event symbols a caption mentions, in order of first mention.
pub fn caption_symbols(caption: &str, extra_vocab: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut vocab: HashSet<String> = VISUAL_VOCAB.iter().chain(AUDIO_VOCAB.iter()).map(|s| s.to_string()).collect();
    vocab.extend(extra_vocab);
    let mut out: Vec<String> = Vec::new();
    for t in tokens(caption) {
        if vocab.contains(&t) && !out.contains(&t) {
            out.push(t);
        }
    }
    out
}

impl Judger for OracleJudger {
    fn consistency(
        &self,
        content_ref: &str,
        span: TimeSpan,
        caption: &str,
        _rules: &RuleSet,
    ) -> Result<JudgeScore, JudgeError> {
        let (_, view) = self.store.resolve(content_ref)?;
        span.check_within(view.duration)?;
        let mentioned = caption_symbols(caption, view.all_events().map(|(_, e)| e.symbol.to_lowercase()));
        if mentioned.is_empty() {
            return Ok(JudgeScore::new(0.0).with_rationale("caption names no known event"));
        }
        let present = mentioned
            .iter()
            .filter(|m| {
                view.all_events()
                    .any(|(_, e)| e.symbol.to_lowercase() == **m && e.span.overlaps(&span))
            })
            .count();
        let coverage = present as f64 / mentioned.len() as f64;
        let exactness = if present == mentioned.len() { 1.0 } else { 0.5 };
        Ok(JudgeScore::new(coverage * exactness)
            .with_rationale(format!("{present}/{} mentioned events in span", mentioned.len())))
    }

    fn completeness(
        &self,
        composite: &CompositeContentRef,
        _question: &str,
        _final_answer: &str,
        rules: &RuleSet,
    ) -> Result<JudgeScore, JudgeError> {
        let (task, view) = self.store.resolve(&composite.content_ref)?;
        let union = composite.source_spans();
        union.check_within(view.duration)?;
        let sufficiency = if task.evidence.is_empty() {
            1.0
        } else {
            task.evidence.iter().filter(|e| union.covers_span(&e.span)).count() as f64
                / task.evidence.len() as f64
        };
        let total = composite.duration();
        let precision = if total > 0.0 {
            (task.t_gt.intersection_measure(&union) / total).min(1.0)
        } else {
            0.0
        };
        let answerable = solve(task, &view.restricted_to(&union)) == Some(task.answer_index());
        let answerability = if answerable { 1.0 } else { 0.0 };
        let value = rules.weight("sufficiency") * sufficiency
            + rules.weight("precision") * precision
            + rules.weight("answerability") * answerability;
        Ok(JudgeScore::new(value).with_rationale(format!(
            "sufficiency={sufficiency:.4} precision={precision:.4} answerability={answerability}"
        )))
    }

    fn answer_text(&self, _question: &str, prediction: &str, reference: &str) -> Result<JudgeScore, JudgeError> {
        Ok(JudgeScore::new(token_f1(prediction, reference)))
    }
}

/// Request body for `POST /v1/judge`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub kind: String,
    pub content_ref: String,
    pub spans: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    pub rules: Vec<String>,
    pub template_id: String,
    /// Label list for `categorize` requests.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub taxonomy: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireReply {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl WireReply {
    pub fn parse(body: &str) -> Result<Self, JudgeError> {
        let value: serde_json::Value =
            serde_json::from_str(body).map_err(|e| JudgeError::Protocol(e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| JudgeError::Protocol("reply is not an object".into()))?;
        let score = match obj.get("score") {
            None | Some(serde_json::Value::Null) => None,
            Some(v) => Some(
                v.as_f64()
                    .ok_or_else(|| JudgeError::Protocol(format!("score is not a number: {v}")))?,
            ),
        };
        let text = |k: &str| obj.get(k).and_then(|v| v.as_str()).map(str::to_string);
        Ok(Self { score, rationale: text("rationale"), label: text("label") })
    }

    pub fn to_score(&self) -> Result<JudgeScore, JudgeError> {
        let score = self
            .score
            .ok_or_else(|| JudgeError::Protocol("reply lacks a score field".into()))?;
        if !score.is_finite() {
            return Err(JudgeError::Protocol("score is not finite".into()));
        }
        let mut s = JudgeScore::new(score);
        s.rationale = self.rationale.clone();
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("request timed out")]
    Timeout,
    #[error("http status {0}")]
    Status(u16),
    #[error("transport error: {0}")]
    Io(String),
    /// The reply cannot exist, so retrying is pointless.
    #[error("not in transcript: {0}")]
    Uncached(String),
}

impl TransportError {
    fn retryable(&self) -> bool {
        match self {
            TransportError::Timeout | TransportError::Io(_) => true,
            TransportError::Status(code) => *code >= 500 || *code == 429,
            TransportError::Uncached(_) => false,
        }
    }
}

/// Delivers one serialized request and returns the raw reply body.
pub trait Transport: Send + Sync {
    fn post(&self, body: &str, timeout: Duration) -> Result<String, TransportError>;
}

/// Transport for replaying cached transcripts; every wire call fails.
#[derive(Debug, Clone, Copy, Default)]
pub struct OfflineTransport;

impl Transport for OfflineTransport {
    fn post(&self, _body: &str, _timeout: Duration) -> Result<String, TransportError> {
        Err(TransportError::Uncached("offline mode makes no wire calls".into()))
    }
}

#[cfg(feature = "http")]
pub use http::HttpTransport;

#[cfg(feature = "http")]
mod http {
    use super::{Transport, TransportError};
    use std::time::Duration;

    /// JSON-over-HTTP transport posting to `{endpoint}/v1/judge`.
    #[derive(Debug, Clone)]
    pub struct HttpTransport {
        url: String,
        token: Option<String>,
    }

    impl HttpTransport {
        pub fn new(endpoint: &str, token: Option<String>) -> Self {
            Self {
                url: format!("{}/v1/judge", endpoint.trim_end_matches('/')),
                token,
            }
        }
    }

    impl Transport for HttpTransport {
        fn post(&self, body: &str, timeout: Duration) -> Result<String, TransportError> {
            let agent: ureq::Agent = ureq::Agent::config_builder()
                .timeout_global(Some(timeout))
                .build()
                .into();
            let mut req = agent.post(&self.url).header("Content-Type", "application/json");
            if let Some(token) = &self.token {
                req = req.header("Authorization", format!("Bearer {token}"));
            }
            match req.send(body) {
                Ok(mut resp) => resp
                    .body_mut()
                    .read_to_string()
                    .map_err(|e| TransportError::Io(e.to_string())),
                Err(ureq::Error::StatusCode(code)) => Err(TransportError::Status(code)),
                Err(ureq::Error::Timeout(_)) => Err(TransportError::Timeout),
                Err(e) => Err(TransportError::Io(e.to_string())),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RemoteConfig {
    pub endpoint: String,
    /// Environment variable holding the bearer token.
    pub token_env: String,
    pub timeout_ms: u64,
    /// Total attempts per request, including the first.
    pub max_attempts: usize,
    /// Base delay of the exponential backoff between attempts.
    pub backoff_ms: u64,
    pub max_in_flight: usize,
    pub consistency_template: String,
    pub completeness_template: String,
    pub answer_template: String,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8080".into(),
            token_env: "OMNIRL_JUDGE_TOKEN".into(),
            timeout_ms: 30_000,
            max_attempts: 3,
            backoff_ms: 500,
            max_in_flight: 8,
            consistency_template: "consistency-v1".into(),
            completeness_template: "completeness-v1".into(),
            answer_template: "answer-v1".into(),
        }
    }
}

struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self { permits: Mutex::new(n.max(1)), freed: Condvar::new() }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut p = self.permits.lock().expect("semaphore poisoned");
        while *p == 0 {
            p = self.freed.wait(p).expect("semaphore poisoned");
        }
        *p -= 1;
        SemaphoreGuard(self)
    }
}

struct SemaphoreGuard<'a>(&'a Semaphore);

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().expect("semaphore poisoned") += 1;
        self.0.freed.notify_one();
    }
}

type CacheCell = Arc<Mutex<Option<WireReply>>>;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TranscriptEntry {
    digest: String,
    reply: WireReply,
}

/// Client for an external judge endpoint.
///
/// Replies are cached by request digest, so identical requests issue one
/// wire call even when made concurrently. The cache doubles as a replayable
/// transcript.
pub struct RemoteJudger<T: Transport> {
    transport: T,
    config: RemoteConfig,
    cache: Mutex<HashMap<String, CacheCell>>,
    in_flight: Semaphore,
}

impl<T: Transport> RemoteJudger<T> {
    pub fn new(transport: T, config: RemoteConfig) -> Self {
        let in_flight = Semaphore::new(config.max_in_flight);
        Self { transport, config, cache: Mutex::new(HashMap::new()), in_flight }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    pub fn request_digest(request: &WireRequest) -> String {
        json_digest(request)
    }

    /// Sends (or serves from cache) one request.
    pub fn call(&self, request: &WireRequest) -> Result<WireReply, JudgeError> {
        let digest = Self::request_digest(request);
        let cell = {
            let mut cache = self.cache.lock().expect("cache poisoned");
            cache.entry(digest).or_default().clone()
        };
        let mut slot = cell.lock().expect("cache cell poisoned");
        if let Some(reply) = slot.as_ref() {
            return Ok(reply.clone());
        }
        let body = serde_json::to_string(request).expect("serializable request");
        let reply = self.send_with_retries(&body)?;
        *slot = Some(reply.clone());
        Ok(reply)
    }

    fn send_with_retries(&self, body: &str) -> Result<WireReply, JudgeError> {
        let timeout = Duration::from_millis(self.config.timeout_ms);
        let attempts = self.config.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            let result = {
                let _permit = self.in_flight.acquire();
                self.transport.post(body, timeout)
            };
            match result {
                Ok(text) => return WireReply::parse(&text),
                Err(e) if e.retryable() => {
                    last = e.to_string();
                    log::debug!("judge attempt {} failed: {last}", attempt + 1);
                    if attempt + 1 < attempts && self.config.backoff_ms > 0 {
                        std::thread::sleep(Duration::from_millis(self.config.backoff_ms << attempt.min(16)));
                    }
                }
                Err(e @ TransportError::Uncached(_)) => {
                    return Err(JudgeError::Unavailable { attempts: attempt + 1, last: e.to_string() })
                }
                Err(e) => return Err(JudgeError::Protocol(e.to_string())),
            }
        }
        Err(JudgeError::Unavailable { attempts, last })
    }

    pub fn call_score(&self, request: &WireRequest) -> Result<JudgeScore, JudgeError> {
        self.call(request)?.to_score()
    }

    pub fn cached_len(&self) -> usize {
        let cache = self.cache.lock().expect("cache poisoned");
        cache
            .values()
            .filter(|c| c.lock().map(|s| s.is_some()).unwrap_or(false))
            .count()
    }

    /// Writes every cached reply as JSON lines, sorted by digest.
    pub fn save_transcript(&self, path: &Path) -> std::io::Result<()> {
        let cache = self.cache.lock().expect("cache poisoned");
        let mut entries: Vec<TranscriptEntry> = cache
            .iter()
            .filter_map(|(d, c)| {
                c.lock().ok()?.clone().map(|reply| TranscriptEntry { digest: d.clone(), reply })
            })
            .collect();
        entries.sort_by(|a, b| a.digest.cmp(&b.digest));
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for e in entries {
            writeln!(f, "{}", serde_json::to_string(&e)?)?;
        }
        f.flush()
    }

    pub fn load_transcript(&self, path: &Path) -> std::io::Result<usize> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut cache = self.cache.lock().expect("cache poisoned");
        let mut n = 0;
        for line in f.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: TranscriptEntry = serde_json::from_str(&line)
                .map_err(|err| std::io::Error::new(std::io::ErrorKind::InvalidData, err))?;
            cache.insert(e.digest, Arc::new(Mutex::new(Some(e.reply))));
            n += 1;
        }
        Ok(n)
    }
}

impl<T: Transport> Judger for RemoteJudger<T> {
    fn consistency(
        &self,
        content_ref: &str,
        span: TimeSpan,
        caption: &str,
        rules: &RuleSet,
    ) -> Result<JudgeScore, JudgeError> {
        let directive = CropDirective::new(content_ref, SegmentSet::new(vec![span]));
        self.call_score(&WireRequest {
            kind: "consistency".into(),
            content_ref: content_ref.into(),
            spans: directive.wire_spans(),
            caption: Some(caption.into()),
            rules: rules.templates(),
            template_id: self.config.consistency_template.clone(),
            ..Default::default()
        })
    }

    fn completeness(
        &self,
        composite: &CompositeContentRef,
        question: &str,
        final_answer: &str,
        rules: &RuleSet,
    ) -> Result<JudgeScore, JudgeError> {
        let directive = CropDirective::new(composite.content_ref.clone(), composite.source_spans());
        self.call_score(&WireRequest {
            kind: "completeness".into(),
            content_ref: composite.content_ref.clone(),
            spans: directive.wire_spans(),
            question: Some(question.into()),
            final_answer: Some(final_answer.into()),
            rules: rules.templates(),
            template_id: self.config.completeness_template.clone(),
            ..Default::default()
        })
    }

    fn answer_text(&self, question: &str, prediction: &str, reference: &str) -> Result<JudgeScore, JudgeError> {
        self.call_score(&WireRequest {
            kind: "answer".into(),
            question: Some(question.into()),
            final_answer: Some(prediction.into()),
            reference: Some(reference.into()),
            template_id: self.config.answer_template.clone(),
            ..Default::default()
        })
    }
}

impl<J: Judger + ?Sized> Judger for Arc<J> {
    fn consistency(&self, c: &str, s: TimeSpan, cap: &str, r: &RuleSet) -> Result<JudgeScore, JudgeError> {
        (**self).consistency(c, s, cap, r)
    }

    fn completeness(&self, c: &CompositeContentRef, q: &str, a: &str, r: &RuleSet) -> Result<JudgeScore, JudgeError> {
        (**self).completeness(c, q, a, r)
    }

    fn answer_text(&self, q: &str, p: &str, r: &str) -> Result<JudgeScore, JudgeError> {
        (**self).answer_text(q, p, r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interval::temporal_concat;
    use crate::world::{Event, Evidence, GeneratedTask, Modality, SymbolicAVContent, TaskTemplate};
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn span(s: f64, e: f64) -> TimeSpan {
        TimeSpan::new(s, e).unwrap()
    }

    fn ev(s: f64, e: f64, sym: &str) -> Event {
        Event { span: span(s, e), symbol: sym.into() }
    }

    /// Visual-next task: anchor "dog" [10,14], target "flag" [16,20].
    fn fixture() -> OracleJudger {
        let task = GeneratedTask {
            id: "t".into(),
            template: TaskTemplate::VisualNext,
            content: SymbolicAVContent {
                duration: 60.0,
                visual_track: vec![
                    ev(2.0, 4.0, "bark-dog"),
                    ev(10.0, 14.0, "dog"),
                    ev(16.0, 20.0, "flag"),
                    ev(30.0, 34.0, "car"),
                    ev(40.0, 44.0, "cup"),
                ],
                audio_track: vec![ev(2.0, 3.0, "bark"), ev(11.0, 13.0, "bell")],
            },
            question: TaskTemplate::VisualNext.question("dog"),
            anchor_symbol: "dog".into(),
            options: vec!["car".into(), "flag".into(), "cup".into(), "dog".into()],
            answer_key: "B".into(),
            reference_answer: "B".into(),
            t_gt: SegmentSet::new(vec![span(10.0, 14.0), span(16.0, 20.0)]),
            evidence: vec![
                Evidence { track: crate::world::Track::Visual, span: span(10.0, 14.0), symbol: "dog".into() },
                Evidence { track: crate::world::Track::Visual, span: span(16.0, 20.0), symbol: "flag".into() },
            ],
            modality_requirement: Modality::V,
        };
        OracleJudger::new(Arc::new(ContentStore::new([task])))
    }

    fn composite(j: &OracleJudger, spans: &[(f64, f64)]) -> CompositeContentRef {
        let set = spans.iter().map(|&(s, e)| span(s, e)).collect();
        temporal_concat(&CropDirective::new("t", set), j.store().task("t").unwrap().content.duration).unwrap()
    }

    #[test]
    fn consistency_oracle_examples() {
        let j = fixture();
        let rules = RuleSet::default_consistency();
        assert_eq!(j.consistency("t", span(2.0, 5.0), "bark", &rules).unwrap().value, 1.0);
        assert_eq!(j.consistency("t", span(2.0, 5.0), "bark siren", &rules).unwrap().value, 0.25);
        assert_eq!(j.consistency("t", span(2.0, 5.0), "nothing here", &rules).unwrap().value, 0.0);
        assert!(matches!(
            j.consistency("t", span(50.0, 70.0), "x", &rules),
            Err(JudgeError::Span(_))
        ));
        assert!(matches!(
            j.consistency("nope", span(1.0, 2.0), "x", &rules),
            Err(JudgeError::ContentNotFound(_))
        ));
    }

    #[test]
    fn completeness_oracle_examples() {
        let j = fixture();
        let rules = RuleSet::default_completeness();
        let perfect = j.completeness(&composite(&j, &[(10.0, 14.0), (16.0, 20.0)]), "", "B", &rules).unwrap();
        assert!((perfect.value - 1.0).abs() < 1e-12);
        // covers all evidence in twice the needed time
        let doubled = j.completeness(&composite(&j, &[(8.0, 14.0), (16.0, 22.0), (50.0, 54.0)]), "", "B", &rules).unwrap();
        assert!((doubled.value - 2.5 / 3.0).abs() < 1e-12, "{doubled:?}");
        let missing = j.completeness(&composite(&j, &[(10.0, 14.0)]), "", "B", &rules).unwrap();
        assert!(missing.value <= 0.5);
        let irrelevant = j.completeness(&composite(&j, &[(40.0, 44.0)]), "", "B", &rules).unwrap();
        assert!(irrelevant.value <= 1.0 / 3.0);
    }

    #[test]
    fn adding_evidence_never_lowers_sufficiency() {
        let j = fixture();
        let only_suff = RuleSet::new(vec![Rule { id: "sufficiency".into(), weight: 1.0, template: String::new() }]).unwrap();
        let before = j.completeness(&composite(&j, &[(30.0, 34.0)]), "", "", &only_suff).unwrap().value;
        let mid = j.completeness(&composite(&j, &[(10.0, 14.0), (30.0, 34.0)]), "", "", &only_suff).unwrap().value;
        let after = j.completeness(&composite(&j, &[(10.0, 14.0), (16.0, 20.0), (30.0, 34.0)]), "", "", &only_suff).unwrap().value;
        assert!(before <= mid && mid <= after);
        assert_eq!(after, 1.0);
    }

    #[test]
    fn answer_choice_normalization() {
        let opts: Vec<String> = ["car", "flag", "cup", "dog"].iter().map(|s| s.to_string()).collect();
        assert_eq!(judge_answer_choice("B", "B", &opts).value, 1.0);
        assert_eq!(judge_answer_choice("b)", "B", &opts).value, 1.0);
        assert_eq!(judge_answer_choice("(B) flag", "B", &opts).value, 1.0);
        assert_eq!(judge_answer_choice("flag", "B", &opts).value, 1.0);
        assert_eq!(judge_answer_choice("A", "B", &opts).value, 0.0);
        assert_eq!(judge_answer_choice("Z", "B", &opts).value, 0.0);
        assert_eq!(judge_answer_choice("", "B", &opts).value, 0.0);
        let j = fixture();
        assert_eq!(judge_answer(&j, "q", "dog flag", "flag dog", None).unwrap().value, 1.0);
        assert!((judge_answer(&j, "q", "dog", "dog flag", None).unwrap().value - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rule_sets_validate_weights() {
        let r = |w: f64| Rule { id: "a".into(), weight: w, template: String::new() };
        assert!(RuleSet::new(vec![r(0.5), r(0.5)]).is_ok());
        assert!(RuleSet::new(vec![r(0.5), r(0.4)]).is_err());
        assert!(RuleSet::new(vec![r(1.5), r(-0.5)]).is_err());
        assert_eq!(RuleSet::default_consistency().rules().len(), 3);
        assert_eq!(RuleSet::default_completeness().rules().len(), 3);
    }

    struct Scripted {
        replies: Mutex<Vec<Result<String, TransportError>>>,
        calls: AtomicUsize,
    }

    impl Scripted {
        fn new(replies: Vec<Result<String, TransportError>>) -> Self {
            Self { replies: Mutex::new(replies), calls: AtomicUsize::new(0) }
        }
    }

    impl Transport for &Scripted {
        fn post(&self, _body: &str, _t: Duration) -> Result<String, TransportError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let mut r = self.replies.lock().unwrap();
            if r.is_empty() {
                Err(TransportError::Timeout)
            } else {
                r.remove(0)
            }
        }
    }

    fn cfg() -> RemoteConfig {
        RemoteConfig { backoff_ms: 0, ..RemoteConfig::default() }
    }

    #[test]
    fn remote_passthrough_and_clamping() {
        let t = Scripted::new(vec![Ok(r#"{"score":0.73}"#.into()), Ok(r#"{"score":1.4,"rationale":"x"}"#.into())]);
        let j = RemoteJudger::new(&t, cfg());
        let rules = RuleSet::default_consistency();
        assert_eq!(j.consistency("c", span(1.0, 2.0), "a", &rules).unwrap().value, 0.73);
        let s = j.consistency("c", span(1.0, 3.0), "a", &rules).unwrap();
        assert_eq!(s.value, 1.0);
        assert_eq!(s.rationale.as_deref(), Some("x"));
    }

    #[test]
    fn remote_retry_contract() {
        let t = Scripted::new(vec![
            Err(TransportError::Timeout),
            Err(TransportError::Timeout),
            Err(TransportError::Timeout),
            Ok(r#"{"score":0.5}"#.into()),
        ]);
        let j = RemoteJudger::new(&t, cfg());
        let e = j.answer_text("q", "p", "r").unwrap_err();
        assert!(matches!(e, JudgeError::Unavailable { attempts: 3, .. }), "{e:?}");
        assert_eq!(t.calls.load(Ordering::SeqCst), 3);

        let t = Scripted::new(vec![Err(TransportError::Status(503)), Ok(r#"{"score":0.5}"#.into())]);
        let j = RemoteJudger::new(&t, cfg());
        assert_eq!(j.answer_text("q", "p", "r").unwrap().value, 0.5);
    }

    #[test]
    fn remote_protocol_errors() {
        for body in [r#"{"rationale":"no score"}"#, r#"{"score":"high"}"#, "not json", "[1]"] {
            let t = Scripted::new(vec![Ok(body.into())]);
            let j = RemoteJudger::new(&t, cfg());
            assert!(matches!(j.answer_text("q", "p", "r"), Err(JudgeError::Protocol(_))), "{body}");
        }
        let t = Scripted::new(vec![Err(TransportError::Status(400))]);
        let j = RemoteJudger::new(&t, cfg());
        assert!(matches!(j.answer_text("q", "p", "r"), Err(JudgeError::Protocol(_))));
    }

    #[test]
    fn identical_requests_hit_the_wire_once() {
        let t = Scripted::new(vec![Ok(r#"{"score":0.2}"#.into()), Ok(r#"{"score":0.9}"#.into())]);
        let j = RemoteJudger::new(&t, cfg());
        let rules = RuleSet::default_consistency();
        let a = j.consistency("c", span(1.0, 2.0), "x", &rules).unwrap();
        let b = j.consistency("c", span(1.0, 2.0), "x", &rules).unwrap();
        assert_eq!(a, b);
        assert_eq!(t.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn concurrent_identical_requests_share_one_call() {
        let t = Scripted::new((0..16).map(|_| Ok(r#"{"score":0.4}"#.to_string())).collect());
        let j = RemoteJudger::new(&t, RemoteConfig { max_in_flight: 2, ..cfg() });
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| j.answer_text("q", "p", "r").unwrap());
            }
        });
        assert_eq!(t.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn transcript_replays_offline() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("transcript.jsonl");
        let t = Scripted::new(vec![Ok(r#"{"score":0.6}"#.into())]);
        let j = RemoteJudger::new(&t, cfg());
        let live = j.answer_text("q", "p", "r").unwrap();
        j.save_transcript(&path).unwrap();
        let offline = RemoteJudger::new(OfflineTransport, cfg());
        assert_eq!(offline.load_transcript(&path).unwrap(), 1);
        assert_eq!(offline.answer_text("q", "p", "r").unwrap(), live);
        assert!(matches!(offline.answer_text("q", "p", "other"), Err(JudgeError::Unavailable { .. })));
    }

    #[test]
    fn wire_request_shape() {
        let req = WireRequest {
            kind: "completeness".into(),
            content_ref: "c".into(),
            spans: vec![[1.0, 2.5]],
            question: Some("q".into()),
            final_answer: Some("B".into()),
            rules: vec!["r".into()],
            template_id: "completeness-v1".into(),
            ..Default::default()
        };
        let v: serde_json::Value = serde_json::to_value(&req).unwrap();
        assert_eq!(v["kind"], "completeness");
        assert_eq!(v["spans"], serde_json::json!([[1.0, 2.5]]));
        assert!(v.get("caption").is_none());
    }
}
