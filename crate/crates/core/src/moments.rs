//! Span algebra over a video's fixed-length segments.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MomentError {
    #[error("video has no segments")]
    EmptyVideo,
    #[error("span [{start}, {end}] is invalid for a video of {num_segments} segments")]
    InvalidSpan {
        start: usize,
        end: usize,
        num_segments: usize,
    },
    #[error("expected exactly 4 annotations, got {0}")]
    Arity(usize),
}

/// Inclusive interval of segment indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl From<(usize, usize)> for Span {
    fn from((start, end): (usize, usize)) -> Self {
        Span { start, end }
    }
}

impl From<Span> for (usize, usize) {
    fn from(s: Span) -> Self {
        (s.start, s.end)
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.start, self.end)
    }
}

impl Span {
    pub const fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    /// Number of segments covered.
    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_valid_for(&self, num_segments: usize) -> bool {
        self.start <= self.end && self.end < num_segments
    }

    pub fn validate(&self, num_segments: usize) -> Result<(), MomentError> {
        if self.is_valid_for(num_segments) {
            Ok(())
        } else {
            Err(MomentError::InvalidSpan {
                start: self.start,
                end: self.end,
                num_segments,
            })
        }
    }

    pub fn full(num_segments: usize) -> Self {
        Span::new(0, num_segments.saturating_sub(1))
    }
}

/// Every contiguous span of `num_segments` segments, sorted by `(start, end)`.
pub fn enumerate_candidates(num_segments: usize) -> Result<Vec<Span>, MomentError> {
    if num_segments == 0 {
        return Err(MomentError::EmptyVideo);
    }
    let mut out = Vec::with_capacity(num_segments * (num_segments + 1) / 2);
    for start in 0..num_segments {
        for end in start..num_segments {
            out.push(Span::new(start, end));
        }
    }
    Ok(out)
}

/// Intersection over union counted in whole segments.
pub fn temporal_iou(a: Span, b: Span) -> f64 {
    let lo = a.start.max(b.start);
    let hi = a.end.min(b.end);
    let inter = if hi >= lo { hi - lo + 1 } else { 0 };
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// Normalised `(start, end)` of a span: `(start / n, (end + 1) / n)`.
pub fn temporal_endpoint_feature(span: Span, num_segments: usize) -> (f64, f64) {
    let n = num_segments as f64;
    (span.start as f64 / n, (span.end + 1) as f64 / n)
}

/// Two annotators agree when both endpoints differ by at most one segment.
pub fn spans_agree(a: Span, b: Span) -> bool {
    a.start.abs_diff(b.start) <= 1 && a.end.abs_diff(b.end) <= 1
}

/// Accepts a description when at least three of the four annotators agree
/// pairwise.
pub fn check_agreement(annotations: &[Span]) -> Result<bool, MomentError> {
    if annotations.len() != 4 {
        return Err(MomentError::Arity(annotations.len()));
    }
    // Any pairwise-agreeing set of size 4 contains one of size 3.
    for skip in 0..4 {
        let triple: Vec<Span> = (0..4).filter(|&k| k != skip).map(|k| annotations[k]).collect();
        if spans_agree(triple[0], triple[1])
            && spans_agree(triple[0], triple[2])
            && spans_agree(triple[1], triple[2])
        {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Most frequent exact span; ties go to the earliest `(start, end)`.
pub fn consensus_span(annotations: &[Span]) -> Option<Span> {
    let mut best: Option<(usize, Span)> = None;
    for &a in annotations {
        let count = annotations.iter().filter(|&&b| b == a).count();
        best = match best {
            Some((c, s)) if c > count || (c == count && s <= a) => Some((c, s)),
            _ => Some((count, a)),
        };
    }
    best.map(|(_, s)| s)
}
