//! Desk-scale symbolic audio-visual world.
//!
//! Content is two event tracks on a 1 Hz integer grid. Every generated task
//! is answerable from the events inside its ground-truth evidence spans, and
//! cross-modal tasks are checked at generation time so that neither track
//! alone pins down the answer.

use crate::curation::SampleRecord;
use crate::interval::{SegmentSet, TimeSpan};
use crate::judge::{judge_answer_choice, JudgeScore};
use crate::util::{json_digest, rng_stream};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

pub const VISUAL_VOCAB: [&str; 32] = [
    "dog", "cat", "flag", "car", "bicycle", "door", "window", "ball", "bird", "tree", "lamp",
    "clock", "cup", "book", "phone", "train", "boat", "kite", "horse", "chair", "umbrella",
    "candle", "mirror", "ladder", "bottle", "hat", "guitar", "drum", "bus", "bridge", "fountain",
    "balloon",
];

pub const AUDIO_VOCAB: [&str; 32] = [
    "siren", "bark", "knock", "whistle", "bell", "applause", "thunder", "engine", "footsteps",
    "laughter", "rain", "horn", "chime", "splash", "crash", "buzz", "drumroll", "meow", "chirp",
    "speech", "music", "alarm", "wind", "typing", "hammering", "cough", "scream", "click",
    "rumble", "sizzle", "ringtone", "pop",
];

pub const OPTION_LETTERS: [&str; 4] = ["A", "B", "C", "D"];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorldError {
    #[error("invalid generation parameters: {0}")]
    BadParams(String),
    #[error("could not satisfy task constraints after {attempts} attempts")]
    GenerationExhausted { attempts: usize },
    #[error("content not found: {0}")]
    ContentNotFound(String),
    #[error("content {content_ref} has no {track} track for setting {setting}")]
    UnsupportedSetting {
        content_ref: String,
        track: Track,
        setting: ModalitySetting,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Track {
    Visual,
    Audio,
}

impl Track {
    pub fn other(self) -> Track {
        match self {
            Track::Visual => Track::Audio,
            Track::Audio => Track::Visual,
        }
    }
}

impl fmt::Display for Track {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Track::Visual => "visual",
            Track::Audio => "audio",
        })
    }
}

/// Input condition for a rollout: both tracks, silent video, or audio only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModalitySetting {
    #[serde(rename = "AV")]
    Av,
    #[serde(rename = "V_ONLY")]
    VisualOnly,
    #[serde(rename = "A_ONLY")]
    AudioOnly,
}

impl ModalitySetting {
    pub const ALL: [ModalitySetting; 3] = [
        ModalitySetting::Av,
        ModalitySetting::VisualOnly,
        ModalitySetting::AudioOnly,
    ];

    pub fn shows(self, track: Track) -> bool {
        !matches!(
            (self, track),
            (ModalitySetting::VisualOnly, Track::Audio) | (ModalitySetting::AudioOnly, Track::Visual)
        )
    }

    pub fn tag(self) -> &'static str {
        match self {
            ModalitySetting::Av => "AV",
            ModalitySetting::VisualOnly => "V_ONLY",
            ModalitySetting::AudioOnly => "A_ONLY",
        }
    }
}

impl fmt::Display for ModalitySetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ModalitySetting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "AV" => Ok(ModalitySetting::Av),
            "V_ONLY" | "V" => Ok(ModalitySetting::VisualOnly),
            "A_ONLY" | "A" => Ok(ModalitySetting::AudioOnly),
            other => Err(format!("unknown modality setting '{other}'")),
        }
    }
}

/// Which tracks a task needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    V,
    A,
    AV,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub span: TimeSpan,
    pub symbol: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolicAVContent {
    pub duration: f64,
    pub visual_track: Vec<Event>,
    pub audio_track: Vec<Event>,
}

impl SymbolicAVContent {
    pub fn track(&self, track: Track) -> &[Event] {
        match track {
            Track::Visual => &self.visual_track,
            Track::Audio => &self.audio_track,
        }
    }

    /// Copy with the tracks hidden by `setting` emptied.
    pub fn masked(&self, setting: ModalitySetting) -> SymbolicAVContent {
        let keep = |t: Track, events: &Vec<Event>| {
            if setting.shows(t) {
                events.clone()
            } else {
                Vec::new()
            }
        };
        SymbolicAVContent {
            duration: self.duration,
            visual_track: keep(Track::Visual, &self.visual_track),
            audio_track: keep(Track::Audio, &self.audio_track),
        }
    }

    /// Events of both tracks whose spans lie inside `region`.
    pub fn restricted_to(&self, region: &SegmentSet) -> SymbolicAVContent {
        let filter = |events: &Vec<Event>| {
            events
                .iter()
                .filter(|e| region.covers_span(&e.span))
                .cloned()
                .collect()
        };
        SymbolicAVContent {
            duration: self.duration,
            visual_track: filter(&self.visual_track),
            audio_track: filter(&self.audio_track),
        }
    }

    pub fn all_events(&self) -> impl Iterator<Item = (Track, &Event)> {
        self.visual_track
            .iter()
            .map(|e| (Track::Visual, e))
            .chain(self.audio_track.iter().map(|e| (Track::Audio, e)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    Next,
    Previous,
    During,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskTemplate {
    VisualNext,
    VisualPrevious,
    AudioNext,
    AudioPrevious,
    VisualDuringSound,
    SoundDuringVisual,
}

impl TaskTemplate {
    pub const ALL: [TaskTemplate; 6] = [
        TaskTemplate::VisualNext,
        TaskTemplate::VisualPrevious,
        TaskTemplate::AudioNext,
        TaskTemplate::AudioPrevious,
        TaskTemplate::VisualDuringSound,
        TaskTemplate::SoundDuringVisual,
    ];

    pub fn anchor_track(self) -> Track {
        match self {
            TaskTemplate::VisualNext | TaskTemplate::VisualPrevious => Track::Visual,
            TaskTemplate::AudioNext | TaskTemplate::AudioPrevious => Track::Audio,
            TaskTemplate::VisualDuringSound => Track::Audio,
            TaskTemplate::SoundDuringVisual => Track::Visual,
        }
    }

    pub fn target_track(self) -> Track {
        match self.relation() {
            Relation::During => self.anchor_track().other(),
            _ => self.anchor_track(),
        }
    }

    pub fn relation(self) -> Relation {
        match self {
            TaskTemplate::VisualNext | TaskTemplate::AudioNext => Relation::Next,
            TaskTemplate::VisualPrevious | TaskTemplate::AudioPrevious => Relation::Previous,
            TaskTemplate::VisualDuringSound | TaskTemplate::SoundDuringVisual => Relation::During,
        }
    }

    pub fn modality(self) -> Modality {
        match self {
            TaskTemplate::VisualNext | TaskTemplate::VisualPrevious => Modality::V,
            TaskTemplate::AudioNext | TaskTemplate::AudioPrevious => Modality::A,
            _ => Modality::AV,
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            TaskTemplate::VisualNext => "visual-next",
            TaskTemplate::VisualPrevious => "visual-previous",
            TaskTemplate::AudioNext => "audio-next",
            TaskTemplate::AudioPrevious => "audio-previous",
            TaskTemplate::VisualDuringSound => "visual-during-sound",
            TaskTemplate::SoundDuringVisual => "sound-during-visual",
        }
    }

    pub fn question(self, anchor: &str) -> String {
        match self {
            TaskTemplate::VisualNext => format!("Which visual event comes right after the {anchor}?"),
            TaskTemplate::VisualPrevious => format!("Which visual event comes right before the {anchor}?"),
            TaskTemplate::AudioNext => format!("Which sound is heard right after the {anchor}?"),
            TaskTemplate::AudioPrevious => format!("Which sound is heard right before the {anchor}?"),
            TaskTemplate::VisualDuringSound => format!("Which visual event is shown while the {anchor} sound plays?"),
            TaskTemplate::SoundDuringVisual => format!("Which sound is heard while the {anchor} is shown?"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub track: Track,
    pub span: TimeSpan,
    pub symbol: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedTask {
    pub id: String,
    pub template: TaskTemplate,
    pub content: SymbolicAVContent,
    pub question: String,
    pub anchor_symbol: String,
    pub options: Vec<String>,
    /// Correct option letter.
    pub answer_key: String,
    /// Dataset label; differs from `answer_key` for injected annotation noise.
    pub reference_answer: String,
    pub t_gt: SegmentSet,
    pub evidence: Vec<Evidence>,
    pub modality_requirement: Modality,
}

impl GeneratedTask {
    pub fn answer_index(&self) -> usize {
        letter_index(&self.answer_key).expect("answer key is a letter")
    }

    /// Question followed by lettered options, as shown to a model.
    pub fn question_with_options(&self) -> String {
        let opts: Vec<String> = self
            .options
            .iter()
            .zip(OPTION_LETTERS)
            .map(|(o, l)| format!("{l}) {o}"))
            .collect();
        format!("{} {}", self.question, opts.join(" "))
    }
}

pub fn letter_index(letter: &str) -> Option<usize> {
    OPTION_LETTERS.iter().position(|l| *l == letter)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenParams {
    pub n_tasks: usize,
    /// Relative weights of V, A and AV tasks.
    pub mix: [f64; 3],
    pub duration_min: u32,
    pub duration_max: u32,
    /// Gap range between consecutive events on a track; smaller gaps mean
    /// denser distractor events.
    pub min_gap: u32,
    pub max_gap: u32,
    pub min_event_len: u32,
    pub max_event_len: u32,
    /// Fraction of tasks whose dataset label is deliberately wrong.
    pub label_noise: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            n_tasks: 256,
            mix: [0.4, 0.2, 0.4],
            duration_min: 20,
            duration_max: 120,
            min_gap: 0,
            max_gap: 4,
            min_event_len: 2,
            max_event_len: 6,
            label_noise: 0.0,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<(), WorldError> {
        let bad = |m: &str| Err(WorldError::BadParams(m.to_string()));
        if self.n_tasks == 0 {
            return bad("n_tasks must be positive");
        }
        if self.mix.iter().any(|w| !w.is_finite() || *w < 0.0) || self.mix.iter().sum::<f64>() <= 0.0 {
            return bad("mix weights must be non-negative with positive sum");
        }
        if self.duration_min < 20 || self.duration_max > 120 || self.duration_min > self.duration_max {
            return bad("duration range must lie within 20..=120 s");
        }
        if self.min_gap > self.max_gap {
            return bad("min_gap > max_gap");
        }
        if self.min_event_len < 2 || self.min_event_len > self.max_event_len {
            return bad("event lengths must satisfy 2 <= min <= max");
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return bad("label_noise must be in [0, 1]");
        }
        Ok(())
    }
}

const MAX_ATTEMPTS: usize = 500;

/// Deterministic corpus for a seed.
pub fn generate_corpus(seed: u64, params: &GenParams) -> Result<Vec<GeneratedTask>, WorldError> {
    params.validate()?;
    (0..params.n_tasks)
        .map(|i| {
            let mut rng = rng_stream(seed, &[0x5eed, i as u64]);
            let total: f64 = params.mix.iter().sum();
            let pick = rng.gen::<f64>() * total;
            let modality = if pick < params.mix[0] {
                Modality::V
            } else if pick < params.mix[0] + params.mix[1] {
                Modality::A
            } else {
                Modality::AV
            };
            let candidates: Vec<TaskTemplate> = TaskTemplate::ALL
                .into_iter()
                .filter(|t| t.modality() == modality)
                .collect();
            let template = *candidates.choose(&mut rng).expect("two templates per modality");
            let id = format!("s{seed}-{i:05}");
            generate_task(&mut rng, id, template, params)
        })
        .collect()
}

pub fn corpus_digest(tasks: &[GeneratedTask]) -> String {
    json_digest(tasks)
}

fn gen_track<R: Rng>(rng: &mut R, duration: u32, vocab: &[&str], p: &GenParams) -> Vec<Event> {
    let mut symbols: Vec<&str> = vocab.to_vec();
    symbols.shuffle(rng);
    let mut events = Vec::new();
    let mut t = rng.gen_range(0..=p.max_gap.max(1));
    while events.len() < symbols.len() {
        let len = rng.gen_range(p.min_event_len..=p.max_event_len);
        if t + len > duration {
            break;
        }
        events.push(Event {
            span: TimeSpan::new(t as f64, (t + len) as f64).expect("positive length"),
            symbol: symbols[events.len()].to_string(),
        });
        t += len + rng.gen_range(p.min_gap..=p.max_gap);
    }
    events
}

fn vocab(track: Track) -> &'static [&'static str] {
    match track {
        Track::Visual => &VISUAL_VOCAB,
        Track::Audio => &AUDIO_VOCAB,
    }
}

fn generate_task<R: Rng>(
    rng: &mut R,
    id: String,
    template: TaskTemplate,
    p: &GenParams,
) -> Result<GeneratedTask, WorldError> {
    for _ in 0..MAX_ATTEMPTS {
        let duration = rng.gen_range(p.duration_min..=p.duration_max);
        let mut visual = gen_track(rng, duration, &VISUAL_VOCAB, p);
        let mut audio = gen_track(rng, duration, &AUDIO_VOCAB, p);
        let anchor_track = template.anchor_track();
        let target_track = template.target_track();
        let (anchor, target) = match template.relation() {
            Relation::Next | Relation::Previous => {
                let events = if anchor_track == Track::Visual { &visual } else { &audio };
                if events.len() < 4 {
                    continue;
                }
                let i = if template.relation() == Relation::Next {
                    rng.gen_range(0..events.len() - 1)
                } else {
                    rng.gen_range(1..events.len())
                };
                let j = if template.relation() == Relation::Next { i + 1 } else { i - 1 };
                (events[i].clone(), events[j].clone())
            }
            Relation::During => {
                let (anchors, targets) = if anchor_track == Track::Visual {
                    (&visual, &mut audio)
                } else {
                    (&audio, &mut visual)
                };
                let long: Vec<&Event> = anchors.iter().filter(|e| e.span.len() >= 2.0).collect();
                let Some(anchor) = long.choose(rng).map(|e| (*e).clone()) else {
                    continue;
                };
                targets.retain(|e| !e.span.overlaps(&anchor.span));
                let used: Vec<&str> = targets.iter().map(|e| e.symbol.as_str()).collect();
                let free: Vec<&&str> = vocab(target_track)
                    .iter()
                    .filter(|s| !used.contains(*s))
                    .collect();
                let Some(symbol) = free.choose(rng) else {
                    continue;
                };
                let (a0, a1) = (anchor.span.start() as u32, anchor.span.end() as u32);
                let s = rng.gen_range(a0..a1);
                let e = rng.gen_range(s + 1..=a1);
                let target = Event {
                    span: TimeSpan::new(s as f64, e as f64).expect("s < e"),
                    symbol: symbol.to_string(),
                };
                targets.push(target.clone());
                targets.sort_by(|x, y| x.span.start().total_cmp(&y.span.start()));
                if targets.len() < 4 {
                    continue;
                }
                (anchor, target)
            }
        };
        let content = SymbolicAVContent {
            duration: duration as f64,
            visual_track: visual,
            audio_track: audio,
        };
        let pool: Vec<String> = content
            .track(target_track)
            .iter()
            .map(|e| e.symbol.clone())
            .filter(|s| *s != target.symbol)
            .collect();
        let mut options: Vec<String> = pool.choose_multiple(rng, 3).cloned().collect();
        options.push(target.symbol.clone());
        options.shuffle(rng);
        let answer = options.iter().position(|o| *o == target.symbol).expect("target in options");
        let answer_key = OPTION_LETTERS[answer].to_string();
        let reference_answer = if rng.gen::<f64>() < p.label_noise {
            let wrong: Vec<&str> = OPTION_LETTERS.iter().copied().filter(|l| *l != answer_key).collect();
            wrong.choose(rng).expect("three wrong letters").to_string()
        } else {
            answer_key.clone()
        };
        let t_gt = SegmentSet::new(vec![anchor.span, target.span]).merge_overlaps();
        let task = GeneratedTask {
            id: id.clone(),
            template,
            question: template.question(&anchor.symbol),
            anchor_symbol: anchor.symbol.clone(),
            options,
            answer_key,
            reference_answer,
            t_gt,
            evidence: vec![
                Evidence { track: anchor_track, span: anchor.span, symbol: anchor.symbol },
                Evidence { track: target_track, span: target.span, symbol: target.symbol },
            ],
            modality_requirement: template.modality(),
            content,
        };
        if task_is_well_posed(&task) {
            return Ok(task);
        }
    }
    Err(WorldError::GenerationExhausted { attempts: MAX_ATTEMPTS })
}

fn task_is_well_posed(task: &GeneratedTask) -> bool {
    let ans = Some(task.answer_index());
    if solve(task, &task.content) != ans {
        return false;
    }
    if solve(task, &task.content.restricted_to(&task.t_gt)) != ans {
        return false;
    }
    if task.modality_requirement == Modality::AV {
        return feasible_options(task, ModalitySetting::VisualOnly).len() > 1
            && feasible_options(task, ModalitySetting::AudioOnly).len() > 1;
    }
    true
}

/// The event the task's relation points at, as seen in `content`.
///
/// `None` when the anchor is not visible or the relation is ambiguous.
pub fn relation_target<'a>(task: &GeneratedTask, content: &'a SymbolicAVContent) -> Option<&'a Event> {
    let anchors = content.track(task.template.anchor_track());
    let anchor_idx = anchors.iter().position(|e| e.symbol == task.anchor_symbol)?;
    let anchor = &anchors[anchor_idx];
    match task.template.relation() {
        Relation::Next => anchors.get(anchor_idx + 1),
        Relation::Previous => anchors.get(anchor_idx.checked_sub(1)?),
        Relation::During => {
            let mut overlapping = content
                .track(task.template.target_track())
                .iter()
                .filter(|e| e.span.overlaps(&anchor.span));
            let first = overlapping.next()?;
            overlapping.next().is_none().then_some(first)
        }
    }
}

/// Answers a task from the given content view, if the view determines a
/// unique option.
pub fn solve(task: &GeneratedTask, content: &SymbolicAVContent) -> Option<usize> {
    let target = relation_target(task, content)?;
    let mut hits = task.options.iter().enumerate().filter(|(_, o)| **o == target.symbol);
    let (idx, _) = hits.next()?;
    hits.next().is_none().then_some(idx)
}

/// Options that remain possible answers when only `setting`'s tracks are
/// observed, over every completion of the hidden tracks.
pub fn feasible_options(task: &GeneratedTask, setting: ModalitySetting) -> Vec<usize> {
    let anchor_seen = setting.shows(task.template.anchor_track());
    let target_seen = setting.shows(task.template.target_track());
    if anchor_seen && target_seen {
        return solve(task, &task.content).into_iter().collect();
    }
    if !target_seen {
        return (0..task.options.len()).collect();
    }
    // anchor hidden: any visible target-track event could co-occur with it
    let visible = task.content.track(task.template.target_track());
    (0..task.options.len())
        .filter(|&i| visible.iter().any(|e| e.symbol == task.options[i]))
        .collect()
}

/// Text rendering of a task under a modality setting.
pub fn render_prompt(task: &GeneratedTask, setting: ModalitySetting) -> String {
    let mut out = format!("question: {}\noptions:", task.question);
    for (letter, option) in OPTION_LETTERS.iter().zip(&task.options) {
        out.push_str(&format!(" {letter}) {option}"));
    }
    out.push('\n');
    for track in [Track::Visual, Track::Audio] {
        if !setting.shows(track) {
            continue;
        }
        out.push_str(&format!("[{track}]\n"));
        for e in task.content.track(track) {
            out.push_str(&format!("{:.2}-{:.2} {}\n", e.span.start(), e.span.end(), e.symbol));
        }
    }
    out
}

/// Multiple-choice answer check against the task's answer key.
pub fn oracle_answer_check(task: &GeneratedTask, prediction: &str) -> JudgeScore {
    judge_answer_choice(prediction, &task.answer_key, &task.options)
}

/// Content references may carry a modality tag: `id` or `id@V_ONLY`.
pub fn split_content_ref(content_ref: &str) -> (&str, ModalitySetting) {
    match content_ref.rsplit_once('@') {
        Some((base, tag)) => match tag.parse() {
            Ok(setting) => (base, setting),
            Err(_) => (content_ref, ModalitySetting::Av),
        },
        None => (content_ref, ModalitySetting::Av),
    }
}

fn tagged_ref(base: &str, setting: ModalitySetting) -> String {
    match setting {
        ModalitySetting::Av => base.to_string(),
        s => format!("{base}@{s}"),
    }
}

/// Symbolic content backend keyed by task id.
#[derive(Debug, Clone, Default)]
pub struct ContentStore {
    tasks: HashMap<String, GeneratedTask>,
}

impl ContentStore {
    pub fn new(tasks: impl IntoIterator<Item = GeneratedTask>) -> Self {
        Self {
            tasks: tasks.into_iter().map(|t| (t.id.clone(), t)).collect(),
        }
    }

    pub fn task(&self, content_ref: &str) -> Result<&GeneratedTask, WorldError> {
        let (base, _) = split_content_ref(content_ref);
        self.tasks
            .get(base)
            .ok_or_else(|| WorldError::ContentNotFound(content_ref.to_string()))
    }

    /// The task and the content visible under the reference's modality tag.
    pub fn resolve(&self, content_ref: &str) -> Result<(&GeneratedTask, SymbolicAVContent), WorldError> {
        let (_, setting) = split_content_ref(content_ref);
        let task = self.task(content_ref)?;
        Ok((task, task.content.masked(setting)))
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

/// Masks a track of the referenced content.
///
/// Symbolic content gets the track removed; references the store does not
/// know (media URIs) are annotated with the setting tag for the remote side.
pub fn ablate_modality(
    store: &ContentStore,
    content_ref: &str,
    setting: ModalitySetting,
) -> Result<String, WorldError> {
    let (base, current) = split_content_ref(content_ref);
    let combined = match (current, setting) {
        (c, ModalitySetting::Av) => c,
        (ModalitySetting::Av, s) => s,
        (c, s) if c == s => s,
        (_, s) => {
            // masking the remaining track leaves nothing to show
            return Err(WorldError::UnsupportedSetting {
                content_ref: content_ref.to_string(),
                track: if s == ModalitySetting::VisualOnly { Track::Visual } else { Track::Audio },
                setting: s,
            });
        }
    };
    let Ok(task) = store.task(base) else {
        if base.contains("://") {
            return Ok(tagged_ref(base, combined));
        }
        return Err(WorldError::ContentNotFound(content_ref.to_string()));
    };
    let required = match setting {
        ModalitySetting::VisualOnly => Some(Track::Visual),
        ModalitySetting::AudioOnly => Some(Track::Audio),
        ModalitySetting::Av => None,
    };
    if let Some(track) = required {
        if task.content.track(track).is_empty() {
            return Err(WorldError::UnsupportedSetting {
                content_ref: content_ref.to_string(),
                track,
                setting,
            });
        }
    }
    let before = task.content.masked(current);
    let after = task.content.masked(combined);
    if before == after {
        return Ok(content_ref.to_string());
    }
    Ok(tagged_ref(base, combined))
}

/// Unscored curation records for a corpus.
pub fn export_manifest(tasks: &[GeneratedTask]) -> Vec<SampleRecord> {
    tasks
        .iter()
        .map(|t| SampleRecord::unscored(&t.id, &t.id, t.question_with_options(), &t.reference_answer, t.content.duration))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(n: usize, mix: [f64; 3]) -> GenParams {
        GenParams { n_tasks: n, mix, ..GenParams::default() }
    }

    #[test]
    fn visual_only_corpus_is_answerable_from_visual_track() {
        let tasks = generate_corpus(7, &params(10, [1.0, 0.0, 0.0])).unwrap();
        assert_eq!(tasks.len(), 10);
        for t in &tasks {
            assert_eq!(t.modality_requirement, Modality::V);
            let silent = t.content.masked(ModalitySetting::VisualOnly);
            assert_eq!(solve(t, &silent), Some(t.answer_index()));
        }
    }

    #[test]
    fn same_seed_same_digest() {
        let p = params(40, [1.0, 1.0, 1.0]);
        let a = corpus_digest(&generate_corpus(3, &p).unwrap());
        let b = corpus_digest(&generate_corpus(3, &p).unwrap());
        let c = corpus_digest(&generate_corpus(4, &p).unwrap());
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn cross_modal_tasks_need_both_tracks() {
        let tasks = generate_corpus(11, &params(60, [0.0, 0.0, 1.0])).unwrap();
        for t in &tasks {
            assert_eq!(t.modality_requirement, Modality::AV);
            assert!(feasible_options(t, ModalitySetting::VisualOnly).len() > 1);
            assert!(feasible_options(t, ModalitySetting::AudioOnly).len() > 1);
            assert_eq!(feasible_options(t, ModalitySetting::Av), vec![t.answer_index()]);
            // target nested in anchor, so the evidence collapses to the anchor span
            assert_eq!(t.t_gt.len(), 1);
            assert_eq!(t.t_gt.spans()[0], t.evidence[0].span);
        }
    }

    #[test]
    fn cross_modal_generator_trace() {
        // siren at [30,34], flag at [31,33]: the evidence merges to the siren span
        let anchor = TimeSpan::new(30.0, 34.0).unwrap();
        let target = TimeSpan::new(31.0, 33.0).unwrap();
        let merged = SegmentSet::new(vec![anchor, target]).merge_overlaps();
        assert_eq!(merged.spans(), &[anchor]);
        let task = GeneratedTask {
            id: "x".into(),
            template: TaskTemplate::VisualDuringSound,
            content: SymbolicAVContent {
                duration: 60.0,
                visual_track: vec![
                    Event { span: TimeSpan::new(10.0, 14.0).unwrap(), symbol: "dog".into() },
                    Event { span: target, symbol: "flag".into() },
                    Event { span: TimeSpan::new(40.0, 44.0).unwrap(), symbol: "car".into() },
                    Event { span: TimeSpan::new(50.0, 54.0).unwrap(), symbol: "cup".into() },
                ],
                audio_track: vec![Event { span: anchor, symbol: "siren".into() }],
            },
            question: TaskTemplate::VisualDuringSound.question("siren"),
            anchor_symbol: "siren".into(),
            options: vec!["dog".into(), "car".into(), "flag".into(), "cup".into()],
            answer_key: "C".into(),
            reference_answer: "C".into(),
            t_gt: merged,
            evidence: vec![],
            modality_requirement: Modality::AV,
        };
        assert_eq!(solve(&task, &task.content).map(|i| task.options[i].as_str()), Some("flag"));
        assert!(task_is_well_posed(&task));
    }

    #[test]
    fn evidence_spans_disjoint_and_sufficient() {
        let tasks = generate_corpus(5, &params(100, [1.0, 1.0, 1.0])).unwrap();
        for t in &tasks {
            assert!(t.t_gt.pairwise_disjoint());
            assert_eq!(solve(t, &t.content.restricted_to(&t.t_gt)), Some(t.answer_index()));
            for track in [Track::Visual, Track::Audio] {
                assert!(t.content.track(track).iter().all(|e| e.span.within(t.content.duration)));
            }
        }
    }

    #[test]
    fn render_masks_tracks() {
        let t = &generate_corpus(1, &params(1, [0.0, 0.0, 1.0])).unwrap()[0];
        let av = render_prompt(t, ModalitySetting::Av);
        assert!(av.contains("[visual]") && av.contains("[audio]"));
        let v = render_prompt(t, ModalitySetting::VisualOnly);
        assert!(!v.contains("[audio]"));
        assert!(t.content.audio_track.iter().all(|e| !v.contains(&format!(" {}\n", e.symbol))));
        let a = render_prompt(t, ModalitySetting::AudioOnly);
        assert!(!a.contains("[visual]"));
    }

    #[test]
    fn rendering_is_injective_over_corpus() {
        let tasks = generate_corpus(9, &params(200, [1.0, 1.0, 1.0])).unwrap();
        let mut seen = std::collections::HashSet::new();
        for t in &tasks {
            assert!(seen.insert(crate::util::sha256_hex(render_prompt(t, ModalitySetting::Av).as_bytes())));
        }
    }

    #[test]
    fn answer_check() {
        let t = &generate_corpus(2, &params(1, [1.0, 0.0, 0.0])).unwrap()[0];
        assert_eq!(oracle_answer_check(t, &t.answer_key).value, 1.0);
        let wrong = OPTION_LETTERS.iter().find(|l| **l != t.answer_key).unwrap();
        assert_eq!(oracle_answer_check(t, wrong).value, 0.0);
        assert_eq!(oracle_answer_check(t, "Z?!").value, 0.0);
    }

    #[test]
    fn ablation_semantics() {
        let tasks = generate_corpus(4, &params(1, [0.0, 0.0, 1.0])).unwrap();
        let id = tasks[0].id.clone();
        let mut silent = tasks[0].clone();
        silent.id = "silent".into();
        silent.content.audio_track.clear();
        let store = ContentStore::new(tasks.into_iter().chain([silent]));
        let v = ablate_modality(&store, &id, ModalitySetting::VisualOnly).unwrap();
        assert!(store.resolve(&v).unwrap().1.audio_track.is_empty());
        let a = ablate_modality(&store, &id, ModalitySetting::AudioOnly).unwrap();
        assert!(store.resolve(&a).unwrap().1.visual_track.is_empty());
        assert_eq!(ablate_modality(&store, "silent", ModalitySetting::VisualOnly).unwrap(), "silent");
        assert_eq!(ablate_modality(&store, &v, ModalitySetting::VisualOnly).unwrap(), v);
        assert!(matches!(
            ablate_modality(&store, "silent", ModalitySetting::AudioOnly),
            Err(WorldError::UnsupportedSetting { .. })
        ));
        assert_eq!(
            ablate_modality(&store, "https://x/clip.mp4", ModalitySetting::AudioOnly).unwrap(),
            "https://x/clip.mp4@A_ONLY"
        );
    }

    #[test]
    fn bad_params_rejected() {
        assert!(generate_corpus(1, &params(0, [1.0, 1.0, 1.0])).is_err());
        assert!(generate_corpus(1, &params(5, [0.0, 0.0, 0.0])).is_err());
    }
}
