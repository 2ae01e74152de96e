//! The structured rollout template:
//! `<time>S-E</time><caption>..</caption> ... <thinking>..</thinking><answer>..</answer>`.
//!
//! One or more time/caption pairs come first, followed by exactly one
//! thinking block and one answer block. Whitespace between blocks is
//! ignored; whitespace inside block bodies is kept verbatim.

use crate::interval::{SegmentSet, TimeSpan};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TAGS: [&str; 4] = ["time", "caption", "thinking", "answer"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("format error at byte {offset}: {reason}")]
pub struct FormatError {
    pub offset: usize,
    pub reason: String,
}

impl FormatError {
    fn at(offset: usize, reason: impl Into<String>) -> Self {
        Self {
            offset,
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedPair {
    pub span: TimeSpan,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredTrace {
    pairs: Vec<GroundedPair>,
    thinking: String,
    final_answer: String,
}

impl StructuredTrace {
    pub fn new(
        pairs: Vec<GroundedPair>,
        thinking: impl Into<String>,
        final_answer: impl Into<String>,
    ) -> Result<Self, FormatError> {
        let thinking = thinking.into();
        let final_answer = final_answer.into();
        if pairs.is_empty() {
            return Err(FormatError::at(0, "zero pairs"));
        }
        let bodies = pairs
            .iter()
            .map(|p| p.caption.as_str())
            .chain([thinking.as_str(), final_answer.as_str()]);
        for body in bodies {
            if contains_marker(body) {
                return Err(FormatError::at(0, "block body contains a template tag"));
            }
        }
        Ok(Self {
            pairs,
            thinking,
            final_answer,
        })
    }

    pub fn pairs(&self) -> &[GroundedPair] {
        &self.pairs
    }

    pub fn thinking(&self) -> &str {
        &self.thinking
    }

    pub fn final_answer(&self) -> &str {
        &self.final_answer
    }

    pub fn spans(&self) -> SegmentSet {
        self.pairs.iter().map(|p| p.span).collect()
    }
}

fn contains_marker(body: &str) -> bool {
    TAGS.iter()
        .any(|t| body.contains(&format!("<{t}>")) || body.contains(&format!("</{t}>")))
}

struct Cursor<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_ws(&mut self) {
        let rest = &self.text[self.pos..];
        self.pos += rest.len() - rest.trim_start().len();
    }

    fn at_end(&self) -> bool {
        self.pos >= self.text.len()
    }

    fn peek_tag(&self) -> Option<&'static str> {
        let rest = &self.text[self.pos..];
        TAGS.iter()
            .find(|t| rest.starts_with(&format!("<{t}>")))
            .copied()
    }

    /// Consumes `<tag>body</tag>` and returns the body.
    fn block(&mut self, tag: &str) -> Result<&'a str, FormatError> {
        let open = format!("<{tag}>");
        let close = format!("</{tag}>");
        let rest = &self.text[self.pos..];
        if !rest.starts_with(&open) {
            return Err(FormatError::at(self.pos, format!("expected {open}")));
        }
        let body_start = self.pos + open.len();
        let Some(rel) = self.text[body_start..].find(&close) else {
            return Err(FormatError::at(body_start, format!("missing {close}")));
        };
        let body = &self.text[body_start..body_start + rel];
        if contains_marker(body) {
            return Err(FormatError::at(body_start, format!("unterminated {open}")));
        }
        self.pos = body_start + rel + close.len();
        Ok(body)
    }
}

/// Parses raw model output into a [`StructuredTrace`].
pub fn parse_trace(text: &str) -> Result<StructuredTrace, FormatError> {
    let mut cur = Cursor { text, pos: 0 };
    let mut pairs = Vec::new();
    loop {
        cur.skip_ws();
        match cur.peek_tag() {
            Some("time") => {
                let at = cur.pos;
                let body = cur.block("time")?;
                let span = parse_span(body).map_err(|r| FormatError::at(at, r))?;
                cur.skip_ws();
                if cur.peek_tag() != Some("caption") {
                    return Err(FormatError::at(cur.pos, "time block not followed by caption"));
                }
                let caption = cur.block("caption")?.to_string();
                pairs.push(GroundedPair { span, caption });
            }
            Some("thinking") => break,
            Some("caption") => return Err(FormatError::at(cur.pos, "caption without time")),
            Some("answer") => return Err(FormatError::at(cur.pos, "answer before thinking")),
            _ if cur.at_end() => return Err(FormatError::at(cur.pos, "missing thinking block")),
            _ => return Err(FormatError::at(cur.pos, "stray text between blocks")),
        }
    }
    if pairs.is_empty() {
        return Err(FormatError::at(cur.pos, "zero pairs"));
    }
    let thinking = cur.block("thinking")?.to_string();
    cur.skip_ws();
    let answer = cur.block("answer")?.to_string();
    cur.skip_ws();
    if !cur.at_end() {
        return Err(FormatError::at(cur.pos, "trailing text after answer"));
    }
    StructuredTrace::new(pairs, thinking, answer)
}

/// Canonical text form; spans use two-decimal seconds.
pub fn serialize_trace(trace: &StructuredTrace) -> String {
    let mut out = String::new();
    for pair in &trace.pairs {
        out.push_str(&format!(
            "<time>{}</time><caption>{}</caption>",
            format_span(&pair.span),
            pair.caption
        ));
    }
    out.push_str(&format!(
        "<thinking>{}</thinking><answer>{}</answer>",
        trace.thinking, trace.final_answer
    ));
    out
}

pub fn format_span(span: &TimeSpan) -> String {
    format!("{:.2}-{:.2}", span.start(), span.end())
}

/// 1.0 for template-compliant output, 0.0 otherwise.
pub fn format_reward(text: &str) -> f64 {
    if parse_trace(text).is_ok() {
        1.0
    } else {
        0.0
    }
}

fn parse_span(body: &str) -> Result<TimeSpan, String> {
    let body = body.trim();
    let (a, b) = body
        .split_once('-')
        .ok_or_else(|| format!("span '{body}' lacks '-'"))?;
    let start = parse_seconds(a.trim())?;
    let end = parse_seconds(b.trim())?;
    if start >= end {
        return Err(format!("span start >= end in '{body}'"));
    }
    TimeSpan::new(start, end).map_err(|e| e.to_string())
}

/// Accepts `S`, `S.ff` or `MM:SS(.ff)`.
fn parse_seconds(s: &str) -> Result<f64, String> {
    let decimal = |t: &str| -> Result<f64, String> {
        let ok = !t.is_empty()
            && t.chars().all(|c| c.is_ascii_digit() || c == '.')
            && t.chars().filter(|&c| c == '.').count() <= 1
            && t.chars().any(|c| c.is_ascii_digit());
        if !ok {
            return Err(format!("bad time value '{t}'"));
        }
        t.parse::<f64>().map_err(|e| e.to_string())
    };
    match s.split_once(':') {
        Some((mm, ss)) => {
            if !mm.chars().all(|c| c.is_ascii_digit()) || mm.is_empty() {
                return Err(format!("bad minutes in '{s}'"));
            }
            let secs = decimal(ss)?;
            if secs >= 60.0 {
                return Err(format!("seconds field >= 60 in '{s}'"));
            }
            Ok(mm.parse::<f64>().map_err(|e| e.to_string())? * 60.0 + secs)
        }
        None => decimal(s),
    }
}
