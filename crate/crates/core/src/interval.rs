//! Interval algebra over grounding segments.
//!
//! Spans are closed-open `[start, end)` in seconds: touching spans are
//! disjoint and zero-length spans are rejected. All comparisons use
//! [`SPAN_TOLERANCE`] so that spans parsed from decimal text compare cleanly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slack applied to containment and disjointness comparisons, in seconds.
pub const SPAN_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IntervalError {
    #[error("span start {start} must be finite and non-negative")]
    BadStart { start: f64 },
    #[error("span start {start} must be < end {end}")]
    Empty { start: f64, end: f64 },
    #[error("span [{start}, {end}) exceeds content duration {duration}")]
    OutOfBounds { start: f64, end: f64, duration: f64 },
}

/// A half-open time interval `[start, end)` in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "(f64, f64)", into = "(f64, f64)")]
pub struct TimeSpan {
    start: f64,
    end: f64,
}

impl TimeSpan {
    pub fn new(start: f64, end: f64) -> Result<Self, IntervalError> {
        if !start.is_finite() || start < 0.0 {
            return Err(IntervalError::BadStart { start });
        }
        if !end.is_finite() || start >= end {
            return Err(IntervalError::Empty { start, end });
        }
        Ok(Self { start, end })
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn len(&self) -> f64 {
        self.end - self.start
    }

    /// Positive-measure overlap.
    pub fn overlaps(&self, other: &TimeSpan) -> bool {
        self.overlap_len(other) > SPAN_TOLERANCE
    }

    pub fn overlap_len(&self, other: &TimeSpan) -> f64 {
        (self.end.min(other.end) - self.start.max(other.start)).max(0.0)
    }

    pub fn contains(&self, other: &TimeSpan) -> bool {
        self.start <= other.start + SPAN_TOLERANCE && other.end <= self.end + SPAN_TOLERANCE
    }

    pub fn within(&self, duration: f64) -> bool {
        self.end <= duration + SPAN_TOLERANCE
    }

    pub fn check_within(&self, duration: f64) -> Result<(), IntervalError> {
        if self.within(duration) {
            Ok(())
        } else {
            Err(IntervalError::OutOfBounds {
                start: self.start,
                end: self.end,
                duration,
            })
        }
    }
}

impl TryFrom<(f64, f64)> for TimeSpan {
    type Error = IntervalError;

    fn try_from((start, end): (f64, f64)) -> Result<Self, Self::Error> {
        TimeSpan::new(start, end)
    }
}

impl From<TimeSpan> for (f64, f64) {
    fn from(span: TimeSpan) -> Self {
        (span.start, span.end)
    }
}

/// An ordered collection of spans, sorted by start (then end).
///
/// Spans may overlap; disjointness is a checked property rather than an
/// invariant because the grounding predicate has to be able to report it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<TimeSpan>", into = "Vec<TimeSpan>")]
pub struct SegmentSet {
    spans: Vec<TimeSpan>,
}

impl From<Vec<TimeSpan>> for SegmentSet {
    fn from(spans: Vec<TimeSpan>) -> Self {
        Self::new(spans)
    }
}

impl From<SegmentSet> for Vec<TimeSpan> {
    fn from(set: SegmentSet) -> Self {
        set.spans
    }
}

impl FromIterator<TimeSpan> for SegmentSet {
    fn from_iter<I: IntoIterator<Item = TimeSpan>>(iter: I) -> Self {
        Self::new(iter.into_iter().collect())
    }
}

impl SegmentSet {
    pub fn new(mut spans: Vec<TimeSpan>) -> Self {
        spans.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.end.total_cmp(&b.end)));
        Self { spans }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn spans(&self) -> &[TimeSpan] {
        &self.spans
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    /// True iff no two spans share positive measure.
    pub fn pairwise_disjoint(&self) -> bool {
        let mut max_end = f64::NEG_INFINITY;
        for span in &self.spans {
            if span.start < max_end - SPAN_TOLERANCE {
                return false;
            }
            max_end = max_end.max(span.end);
        }
        true
    }

    /// Standard interval merge. Touching spans are fused as well, so the
    /// output is separated by strictly positive gaps.
    pub fn merge_overlaps(&self) -> SegmentSet {
        let mut merged: Vec<TimeSpan> = Vec::with_capacity(self.spans.len());
        for span in &self.spans {
            match merged.last_mut() {
                Some(last) if span.start <= last.end + SPAN_TOLERANCE => {
                    last.end = last.end.max(span.end);
                }
                _ => merged.push(*span),
            }
        }
        SegmentSet { spans: merged }
    }

    /// Measure of the union.
    pub fn measure(&self) -> f64 {
        self.merge_overlaps().spans.iter().map(TimeSpan::len).sum()
    }

    /// Sum of span lengths, counting overlapping time repeatedly.
    pub fn total_length(&self) -> f64 {
        self.spans.iter().map(TimeSpan::len).sum()
    }

    /// True iff `span` lies inside the union of this set.
    pub fn covers_span(&self, span: &TimeSpan) -> bool {
        // merged pieces are separated by gaps, so a covered span sits in one piece
        self.merge_overlaps().spans.iter().any(|m| m.contains(span))
    }

    /// True iff every span of `target` lies inside the union of `self`.
    pub fn union_covers(&self, target: &SegmentSet) -> bool {
        let merged = self.merge_overlaps();
        target
            .spans
            .iter()
            .all(|t| merged.spans.iter().any(|m| m.contains(t)))
    }

    /// Coverage of `target` plus pairwise disjointness of `self`.
    pub fn disjoint_cover(&self, target: &SegmentSet) -> bool {
        self.union_covers(target) && self.pairwise_disjoint()
    }

    /// Measure of `∪self ∩ ∪other`.
    pub fn intersection_measure(&self, other: &SegmentSet) -> f64 {
        let a = self.merge_overlaps();
        let b = other.merge_overlaps();
        let (mut i, mut j) = (0, 0);
        let mut total = 0.0;
        while i < a.spans.len() && j < b.spans.len() {
            total += a.spans[i].overlap_len(&b.spans[j]);
            if a.spans[i].end < b.spans[j].end {
                i += 1;
            } else {
                j += 1;
            }
        }
        total
    }

    pub fn check_within(&self, duration: f64) -> Result<(), IntervalError> {
        self.spans.iter().try_for_each(|s| s.check_within(duration))
    }
}

pub fn pairwise_disjoint(s: &SegmentSet) -> bool {
    s.pairwise_disjoint()
}

pub fn union_covers(s: &SegmentSet, t_gt: &SegmentSet) -> bool {
    s.union_covers(t_gt)
}

pub fn disjoint_cover(s: &SegmentSet, t_gt: &SegmentSet) -> bool {
    s.disjoint_cover(t_gt)
}

pub fn merge_overlaps(s: &SegmentSet) -> SegmentSet {
    s.merge_overlaps()
}

/// Temporal IoU of two span sets, measured on their unions.
///
/// Two empty sets agree perfectly (1.0); one empty set scores 0.0.
pub fn segment_iou(a: &SegmentSet, b: &SegmentSet) -> f64 {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let inter = a.intersection_measure(b);
    let union = a.measure() + b.measure() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// A request to cut the given spans out of one piece of content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropDirective {
    pub content_ref: String,
    pub spans: SegmentSet,
}

impl CropDirective {
    pub fn new(content_ref: impl Into<String>, spans: SegmentSet) -> Self {
        Self {
            content_ref: content_ref.into(),
            spans,
        }
    }

    /// Spans rounded to centiseconds, as sent over the judge wire protocol.
    pub fn wire_spans(&self) -> Vec<[f64; 2]> {
        self.spans
            .spans()
            .iter()
            .map(|s| [round_centis(s.start), round_centis(s.end)])
            .collect()
    }
}

pub(crate) fn round_centis(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// One source segment placed on the composite timeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositePiece {
    pub source: TimeSpan,
    pub offset: f64,
}

/// The temporally ordered concatenation of cropped segments, with the
/// table needed to map composite time back to source time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeContentRef {
    pub content_ref: String,
    pub pieces: Vec<CompositePiece>,
}

impl CompositeContentRef {
    pub fn duration(&self) -> f64 {
        self.pieces.iter().map(|p| p.source.len()).sum()
    }

    /// Source spans in composite order.
    pub fn source_spans(&self) -> SegmentSet {
        self.pieces.iter().map(|p| p.source).collect()
    }

    /// Maps a composite timestamp to the source timestamp it shows.
    ///
    /// Piece boundaries resolve to the later piece; the final end point maps
    /// to the end of the last piece.
    pub fn remap(&self, t: f64) -> Option<f64> {
        if t < -SPAN_TOLERANCE {
            return None;
        }
        let last = self.pieces.last()?;
        for piece in &self.pieces {
            let local = t - piece.offset;
            if local >= -SPAN_TOLERANCE && local < piece.source.len() - SPAN_TOLERANCE {
                return Some(piece.source.start + local.max(0.0));
            }
        }
        let end = last.offset + last.source.len();
        ((t - end).abs() <= SPAN_TOLERANCE).then_some(last.source.end)
    }

    /// Inverse of [`remap`](Self::remap) for times that fall inside a piece.
    pub fn to_composite(&self, source_t: f64) -> Option<f64> {
        self.pieces.iter().find_map(|p| {
            let local = source_t - p.source.start;
            (local >= -SPAN_TOLERANCE && local <= p.source.len() + SPAN_TOLERANCE)
                .then(|| p.offset + local.clamp(0.0, p.source.len()))
        })
    }
}

/// Builds the composite clip reference for a crop directive.
pub fn temporal_concat(
    directive: &CropDirective,
    content_duration: f64,
) -> Result<CompositeContentRef, IntervalError> {
    directive.spans.check_within(content_duration)?;
    let mut offset = 0.0;
    let pieces = directive
        .spans
        .spans()
        .iter()
        .map(|&source| {
            let piece = CompositePiece { source, offset };
            offset += source.len();
            piece
        })
        .collect();
    Ok(CompositeContentRef {
        content_ref: directive.content_ref.clone(),
        pieces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(spans: &[(f64, f64)]) -> SegmentSet {
        spans
            .iter()
            .map(|&(s, e)| TimeSpan::new(s, e).unwrap())
            .collect()
    }

    #[test]
    fn rejects_degenerate_spans() {
        assert!(TimeSpan::new(5.0, 5.0).is_err());
        assert!(TimeSpan::new(5.0, 2.0).is_err());
        assert!(TimeSpan::new(-1.0, 2.0).is_err());
        assert!(TimeSpan::new(f64::NAN, 2.0).is_err());
    }

    #[test]
    fn disjointness_examples() {
        assert!(set(&[(0.0, 5.0), (5.0, 10.0)]).pairwise_disjoint());
        assert!(!set(&[(0.0, 5.0), (4.0, 10.0)]).pairwise_disjoint());
        assert!(SegmentSet::empty().pairwise_disjoint());
        // a long span can overlap a non-adjacent later one
        assert!(!set(&[(0.0, 20.0), (5.0, 6.0), (10.0, 12.0)]).pairwise_disjoint());
    }

    #[test]
    fn coverage_examples() {
        let s = set(&[(0.0, 5.0), (10.0, 15.0)]);
        assert!(s.union_covers(&set(&[(2.0, 4.0), (11.0, 12.0)])));
        assert!(!set(&[(0.0, 5.0)]).union_covers(&set(&[(2.0, 7.0)])));
        // coverage across touching pieces
        assert!(set(&[(0.0, 5.0), (5.0, 10.0)]).union_covers(&set(&[(3.0, 7.0)])));
    }

    #[test]
    fn predicate_is_a_conjunction() {
        let gt = set(&[(2.0, 4.0)]);
        assert!(set(&[(0.0, 5.0), (6.0, 8.0)]).disjoint_cover(&gt));
        assert!(!set(&[(0.0, 5.0), (4.0, 8.0)]).disjoint_cover(&gt));
    }

    #[test]
    fn merge_examples() {
        assert_eq!(set(&[(0.0, 5.0), (4.0, 10.0)]).merge_overlaps(), set(&[(0.0, 10.0)]));
        assert_eq!(SegmentSet::empty().merge_overlaps(), SegmentSet::empty());
    }

    #[test]
    fn iou_examples() {
        let a = set(&[(0.0, 4.0)]);
        assert_eq!(segment_iou(&a, &a), 1.0);
        assert_eq!(segment_iou(&a, &set(&[(5.0, 6.0)])), 0.0);
        assert!((segment_iou(&a, &set(&[(2.0, 6.0)])) - 2.0 / 6.0).abs() < 1e-12);
        assert_eq!(segment_iou(&SegmentSet::empty(), &SegmentSet::empty()), 1.0);
        assert_eq!(segment_iou(&a, &SegmentSet::empty()), 0.0);
    }

    #[test]
    fn concat_sorts_and_remaps() {
        let d = CropDirective::new("c", set(&[(10.0, 12.0), (2.0, 4.0)]));
        let comp = temporal_concat(&d, 60.0).unwrap();
        assert_eq!(comp.pieces[0].source, TimeSpan::new(2.0, 4.0).unwrap());
        assert_eq!(comp.pieces[1].source, TimeSpan::new(10.0, 12.0).unwrap());
        assert_eq!(comp.duration(), 4.0);
        assert_eq!(comp.remap(3.0), Some(11.0));
        assert_eq!(comp.remap(1.0), Some(3.0));
        assert_eq!(comp.remap(4.0), Some(12.0));
        assert_eq!(comp.remap(4.5), None);
        assert_eq!(comp.to_composite(11.0), Some(3.0));
    }

    #[test]
    fn single_span_concat_is_identity_shift() {
        let d = CropDirective::new("c", set(&[(7.0, 9.0)]));
        let comp = temporal_concat(&d, 60.0).unwrap();
        assert_eq!(comp.remap(0.0), Some(7.0));
        assert_eq!(comp.remap(1.5), Some(8.5));
    }

    #[test]
    fn concat_rejects_out_of_bounds() {
        let d = CropDirective::new("c", set(&[(50.0, 70.0)]));
        assert!(matches!(
            temporal_concat(&d, 60.0),
            Err(IntervalError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn serde_as_pairs() {
        let s = set(&[(2.0, 4.5)]);
        assert_eq!(serde_json::to_string(&s).unwrap(), "[[2.0,4.5]]");
        assert!(serde_json::from_str::<TimeSpan>("[4.0,1.0]").is_err());
        let d = CropDirective::new("c", set(&[(1.234, 2.0)]));
        assert_eq!(d.wire_spans(), vec![[1.23, 2.0]]);
    }
}
