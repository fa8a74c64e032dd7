//! Visual temporal context features: local and global mean pooling plus
//! temporal endpoint features, and sliding windows for fine-grained scoring.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::moments::{temporal_endpoint_feature, MomentError, Span};
use crate::numerics::Tensor2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("video `{0}` has no frames")]
    EmptyVideo(String),
    #[error("span {span} of video `{video}` covers no frames")]
    DegenerateSpan { video: String, span: Span },
    #[error("invalid geometry for video `{video}`: {reason}")]
    Geometry { video: String, reason: String },
    #[error("non-finite feature in video `{video}` at frame {row}, dim {col}")]
    NonFinite {
        video: String,
        row: usize,
        col: usize,
    },
    #[error("window and stride must be at least one frame (window {window}, stride {stride})")]
    Window { window: usize, stride: usize },
    #[error(transparent)]
    Span(#[from] MomentError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Flow,
}

impl Modality {
    pub fn code(self) -> u8 {
        match self {
            Modality::Rgb => 0,
            Modality::Flow => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Modality::Rgb),
            1 => Some(Modality::Flow),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Rgb => "rgb",
            Modality::Flow => "flow",
        })
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rgb" => Ok(Modality::Rgb),
            "flow" => Ok(Modality::Flow),
            other => Err(format!("unknown modality `{other}`")),
        }
    }
}

/// Per-frame features of one video in one modality.
///
/// Frames map uniformly onto segments, `frames_per_segment` each, with the
/// last segment absorbing any remainder.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeatures {
    video_id: String,
    modality: Modality,
    frames: Tensor2,
    num_segments: usize,
    frames_per_segment: usize,
}

impl VideoFeatures {
    pub fn new(
        video_id: impl Into<String>,
        modality: Modality,
        frames: Tensor2,
        num_segments: usize,
        frames_per_segment: usize,
    ) -> Result<Self, FeatureError> {
        let video_id = video_id.into();
        let t = frames.rows();
        if t == 0 {
            return Err(FeatureError::EmptyVideo(video_id));
        }
        if num_segments == 0 || frames_per_segment == 0 {
            return Err(FeatureError::Geometry {
                video: video_id,
                reason: format!(
                    "{num_segments} segments of {frames_per_segment} frames"
                ),
            });
        }
        if (num_segments - 1) * frames_per_segment >= t {
            return Err(FeatureError::Geometry {
                video: video_id,
                reason: format!(
                    "{t} frames cannot fill {num_segments} segments of {frames_per_segment} frames"
                ),
            });
        }
        if let Some(i) = frames.data().iter().position(|v| !v.is_finite()) {
            let cols = frames.cols().max(1);
            return Err(FeatureError::NonFinite {
                video: video_id,
                row: i / cols,
                col: i % cols,
            });
        }
        Ok(Self {
            video_id,
            modality,
            frames,
            num_segments,
            frames_per_segment,
        })
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn frames(&self) -> &Tensor2 {
        &self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn num_segments(&self) -> usize {
        self.num_segments
    }

    pub fn frames_per_segment(&self) -> usize {
        self.frames_per_segment
    }

    pub fn segment_of_frame(&self, frame: usize) -> usize {
        (frame / self.frames_per_segment).min(self.num_segments - 1)
    }

    pub fn segment_frames(&self, segment: usize) -> Range<usize> {
        let start = segment * self.frames_per_segment;
        let end = if segment + 1 == self.num_segments {
            self.num_frames()
        } else {
            (segment + 1) * self.frames_per_segment
        };
        start..end
    }

    pub fn span_frames(&self, span: Span) -> Result<Range<usize>, FeatureError> {
        span.validate(self.num_segments)?;
        Ok(self.segment_frames(span.start).start..self.segment_frames(span.end).end)
    }

    fn mean_rows(&self, rows: Range<usize>) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim()];
        let n = rows.len() as f64;
        for r in rows {
            for (a, v) in acc.iter_mut().zip(self.frames.row(r)) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}

/// Videos keyed by id.
pub type VideoSet = BTreeMap<String, Video>;

/// Both modalities of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub rgb: VideoFeatures,
    pub flow: VideoFeatures,
}

impl Video {
    pub fn new(rgb: VideoFeatures, flow: VideoFeatures) -> Result<Self, FeatureError> {
        let fail = |reason: String| FeatureError::Geometry {
            video: rgb.video_id.clone(),
            reason,
        };
        if rgb.modality != Modality::Rgb || flow.modality != Modality::Flow {
            return Err(fail(format!(
                "expected rgb and flow features, got {} and {}",
                rgb.modality, flow.modality
            )));
        }
        if rgb.video_id != flow.video_id {
            return Err(fail(format!("flow features belong to `{}`", flow.video_id)));
        }
        if rgb.num_segments != flow.num_segments {
            return Err(fail(format!(
                "rgb has {} segments but flow has {}",
                rgb.num_segments, flow.num_segments
            )));
        }
        Ok(Self { rgb, flow })
    }

    pub fn id(&self) -> &str {
        &self.rgb.video_id
    }

    pub fn num_segments(&self) -> usize {
        self.rgb.num_segments
    }

    pub fn modality(&self, m: Modality) -> &VideoFeatures {
        match m {
            Modality::Rgb => &self.rgb,
            Modality::Flow => &self.flow,
        }
    }
}

/// Local, global and endpoint parts of one candidate's visual input.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalContextInput {
    pub local: Vec<f64>,
    pub global: Vec<f64>,
    pub tef: (f64, f64),
}

impl TemporalContextInput {
    pub fn len(&self) -> usize {
        self.local.len() + self.global.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `[local; global; tef_start; tef_end]`
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(&self.local);
        v.extend_from_slice(&self.global);
        v.push(self.tef.0);
        v.push(self.tef.1);
        v
    }
}

/// Which context parts feed the visual branches. Disabled parts are zero-filled
/// so the network input width stays `2·D + 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureFlags {
    pub use_global: bool,
    pub use_tef: bool,
}

impl Default for FeatureFlags {
    fn default() -> Self {
        Self {
            use_global: true,
            use_tef: true,
        }
    }
}

pub fn context_width(feature_dim: usize) -> usize {
    2 * feature_dim + 2
}

pub fn pool_local(vf: &VideoFeatures, span: Span) -> Result<Vec<f64>, FeatureError> {
    let rows = vf.span_frames(span)?;
    if rows.is_empty() {
        return Err(FeatureError::DegenerateSpan {
            video: vf.video_id.clone(),
            span,
        });
    }
    Ok(vf.mean_rows(rows))
}

pub fn pool_global(vf: &VideoFeatures) -> Result<Vec<f64>, FeatureError> {
    if vf.num_frames() == 0 {
        return Err(FeatureError::EmptyVideo(vf.video_id.clone()));
    }
    Ok(vf.mean_rows(0..vf.num_frames()))
}

pub fn build_context_input(
    vf: &VideoFeatures,
    span: Span,
    flags: FeatureFlags,
) -> Result<TemporalContextInput, FeatureError> {
    let local = pool_local(vf, span)?;
    let global = if flags.use_global {
        pool_global(vf)?
    } else {
        vec![0.0; vf.dim()]
    };
    let tef = if flags.use_tef {
        temporal_endpoint_feature(span, vf.num_segments)
    } else {
        (0.0, 0.0)
    };
    Ok(TemporalContextInput { local, global, tef })
}

/// Context inputs for every span of `spans`, sharing one global pooling pass.
pub fn build_context_inputs(
    vf: &VideoFeatures,
    spans: &[Span],
    flags: FeatureFlags,
) -> Result<Vec<Vec<f64>>, FeatureError> {
    let global = if flags.use_global {
        pool_global(vf)?
    } else {
        vec![0.0; vf.dim()]
    };
    spans
        .iter()
        .map(|&span| {
            let local = pool_local(vf, span)?;
            let tef = if flags.use_tef {
                temporal_endpoint_feature(span, vf.num_segments)
            } else {
                (0.0, 0.0)
            };
            Ok(TemporalContextInput {
                local,
                global: global.clone(),
                tef,
            }
            .to_vec())
        })
        .collect()
}

/// A frame-level proposal `[start_frame, end_frame)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub start_frame: usize,
    pub end_frame: usize,
    pub local: Vec<f64>,
    pub tef: (f64, f64),
}

/// Windows `[i, i + window)` for `i = 0, stride, 2·stride, …` while the window
/// fits. A window longer than the video yields one whole-video window.
pub fn sliding_windows(
    vf: &VideoFeatures,
    window_frames: usize,
    stride_frames: usize,
) -> Result<Vec<Window>, FeatureError> {
    if window_frames == 0 || stride_frames == 0 {
        return Err(FeatureError::Window {
            window: window_frames,
            stride: stride_frames,
        });
    }
    let t = vf.num_frames();
    if t == 0 {
        return Err(FeatureError::EmptyVideo(vf.video_id.clone()));
    }
    let window = window_frames.min(t);
    let tf = t as f64;
    Ok((0..=t - window)
        .step_by(stride_frames)
        .map(|i| Window {
            start_frame: i,
            end_frame: i + window,
            local: vf.mean_rows(i..i + window),
            tef: ((i as f64 / tf).clamp(0.0, 1.0), ((i + window) as f64 / tf).clamp(0.0, 1.0)),
        })
        .collect())
}

impl Window {
    pub fn context_input(&self, global: &[f64], flags: FeatureFlags) -> TemporalContextInput {
        TemporalContextInput {
            local: self.local.clone(),
            global: if flags.use_global {
                global.to_vec()
            } else {
                vec![0.0; global.len()]
            },
            tef: if flags.use_tef { self.tef } else { (0.0, 0.0) },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn video(rows: Vec<Vec<f64>>, segments: usize, fps: usize) -> VideoFeatures {
        VideoFeatures::new("v", Modality::Rgb, Tensor2::from_rows(&rows).unwrap(), segments, fps)
            .unwrap()
    }

    fn random_video(seed: u64, t: usize, d: usize, segments: usize, fps: usize) -> VideoFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..t)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        video(rows, segments, fps)
    }

    fn naive_mean(rows: &[&[f64]]) -> Vec<f64> {
        let d = rows[0].len();
        let mut out = vec![0.0; d];
        for c in 0..d {
            let mut s = 0.0;
            for r in rows {
                s += r[c];
            }
            out[c] = s / rows.len() as f64;
        }
        out
    }

    #[test]
    fn single_frame_span() {
        let v = video(vec![vec![1.0, 2.0], vec![3.0, 4.0]], 2, 1);
        assert_eq!(pool_local(&v, Span::new(1, 1)).unwrap(), vec![3.0, 4.0]);
    }

    #[test]
    fn two_frame_mean() {
        let v = video(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 1, 2);
        assert_eq!(pool_local(&v, Span::new(0, 0)).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn local_pool_matches_row_average() {
        let v = random_video(3, 12, 4, 6, 2);
        let rows: Vec<&[f64]> = (2..6).map(|r| v.frames().row(r)).collect();
        let expected = naive_mean(&rows);
        let got = pool_local(&v, Span::new(1, 2)).unwrap();
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn global_pool_matches_naive_sum() {
        let v = random_video(11, 17, 5, 5, 3);
        let rows: Vec<&[f64]> = (0..17).map(|r| v.frames().row(r)).collect();
        let expected = naive_mean(&rows);
        for (a, b) in pool_global(&v).unwrap().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_frames_pool_to_constant() {
        let v = video(vec![vec![0.25, -3.0]; 6], 3, 2);
        assert_eq!(pool_global(&v).unwrap(), vec![0.25, -3.0]);
    }

    #[test]
    fn last_segment_absorbs_remainder() {
        let v = random_video(1, 14, 2, 6, 2);
        assert_eq!(v.segment_frames(5), 10..14);
        assert_eq!(v.segment_of_frame(13), 5);
    }

    #[test]
    fn geometry_validation() {
        let t = Tensor2::zeros(5, 2);
        assert!(VideoFeatures::new("v", Modality::Rgb, t.clone(), 6, 1).is_err());
        assert!(VideoFeatures::new("v", Modality::Rgb, t.clone(), 3, 0).is_err());
        assert!(VideoFeatures::new("v", Modality::Rgb, Tensor2::zeros(0, 2), 1, 1).is_err());
        let mut bad = t;
        bad.set(3, 1, f64::NAN);
        let err = VideoFeatures::new("v", Modality::Rgb, bad, 5, 1).unwrap_err();
        assert!(matches!(err, FeatureError::NonFinite { row: 3, col: 1, .. }));
    }

    #[test]
    fn context_input_layout() {
        let v = random_video(5, 6, 2, 6, 1);
        let c = build_context_input(&v, Span::new(0, 0), FeatureFlags::default()).unwrap();
        let flat = c.to_vec();
        assert_eq!(flat.len(), 6);
        assert_eq!(&flat[..2], v.frames().row(0));
        assert_eq!(flat[2..4].to_vec(), pool_global(&v).unwrap());
        assert_eq!(flat[4], 0.0);
        assert!((flat[5] - 0.1667).abs() < 1e-4);
    }

    #[test]
    fn disabled_parts_are_zero() {
        let v = random_video(5, 6, 3, 6, 1);
        let no_global = FeatureFlags { use_global: false, use_tef: true };
        let c = build_context_input(&v, Span::new(2, 3), no_global).unwrap();
        assert_eq!(c.global, vec![0.0; 3]);
        let no_tef = FeatureFlags { use_global: true, use_tef: false };
        let c = build_context_input(&v, Span::new(2, 3), no_tef).unwrap();
        assert_eq!(c.tef, (0.0, 0.0));
    }

    #[test]
    fn windows_by_hand() {
        let v = random_video(2, 10, 2, 5, 2);
        let w = sliding_windows(&v, 4, 3).unwrap();
        let starts: Vec<usize> = w.iter().map(|w| w.start_frame).collect();
        assert_eq!(starts, vec![0, 3, 6]);
        assert_eq!(w[2].end_frame, 10);
        assert_eq!(w[1].tef, (0.3, 0.7));
    }

    #[test]
    fn whole_video_window() {
        let v = random_video(2, 10, 2, 5, 2);
        for window in [10, 25] {
            let w = sliding_windows(&v, window, 1).unwrap();
            assert_eq!(w.len(), 1);
            assert_eq!(w[0].local, pool_global(&v).unwrap());
            assert_eq!(w[0].tef, (0.0, 1.0));
        }
        assert!(sliding_windows(&v, 0, 1).is_err());
        assert!(sliding_windows(&v, 2, 0).is_err());
    }

    proptest! {
        #[test]
        fn full_span_equals_global(seed in any::<u64>(), segs in 1usize..7, fps in 1usize..4, extra in 0usize..3) {
            let v = random_video(seed, segs * fps + extra, 3, segs, fps);
            prop_assert_eq!(pool_local(&v, Span::full(segs)).unwrap(), pool_global(&v).unwrap());
        }

        #[test]
        fn shift_moves_pools_not_tef(seed in any::<u64>(), shift in -5.0f64..5.0) {
            let v = random_video(seed, 12, 3, 6, 2);
            let shifted_rows: Vec<Vec<f64>> = (0..12)
                .map(|r| v.frames().row(r).iter().map(|x| x + shift).collect())
                .collect();
            let w = video(shifted_rows, 6, 2);
            let span = Span::new(1, 3);
            let a = build_context_input(&v, span, FeatureFlags::default()).unwrap();
            let b = build_context_input(&w, span, FeatureFlags::default()).unwrap();
            for (x, y) in a.local.iter().zip(&b.local) {
                prop_assert!((y - x - shift).abs() < 1e-9);
            }
            for (x, y) in a.global.iter().zip(&b.global) {
                prop_assert!((y - x - shift).abs() < 1e-9);
            }
            prop_assert_eq!(a.tef, b.tef);
        }

        #[test]
        fn pooling_permutation_invariant(seed in any::<u64>()) {
            let v = random_video(seed, 6, 2, 1, 6);
            let mut rows: Vec<Vec<f64>> = (0..6).map(|r| v.frames().row(r).to_vec()).collect();
            rows.reverse();
            let w = video(rows, 1, 6);
            let a = pool_local(&v, Span::new(0, 0)).unwrap();
            let b = pool_local(&w, Span::new(0, 0)).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn context_width_constant(seed in any::<u64>()) {
            let v = random_video(seed, 13, 4, 6, 2);
            let spans = crate::moments::enumerate_candidates(6).unwrap();
            let inputs = build_context_inputs(&v, &spans, FeatureFlags::default()).unwrap();
            prop_assert!(inputs.iter().all(|x| x.len() == context_width(4)));
        }
    }
}
