//! Synthetic corpora with planted ground truth.
//!
//! Every segment shows one latent concept; its frames are the concept's
//! feature vector plus Gaussian noise. A concept query names the concepts of
//! one span in order ("dog then kite"). A positional video shows one concept
//! in both its first and last segment and is queried with "first X" or
//! "last X", which only endpoint features can resolve.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{io_error, write_annotations, write_features, write_index, write_splits, AnnotationRecord, DataError, IndexEntry, Split};
use crate::features::{Modality, Video, VideoFeatures};
use crate::language::write_embeddings;
use crate::moments::Span;
use crate::numerics::Tensor2;

const NOUNS: &[&str] = &[
    "dog", "kite", "car", "boat", "tree", "ball", "bird", "horse", "guitar", "bicycle", "train", "flower",
    "cake", "door", "river", "bridge", "candle", "clock", "chair", "lamp", "fish", "hat", "drum", "tent",
    "apple", "bus", "cat", "fence", "piano", "rope", "shoe", "tower",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub num_videos: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub min_segments: usize,
    pub max_segments: usize,
    pub frames_per_segment: usize,
    /// Feature width D of both modalities.
    pub dim: usize,
    pub concepts: usize,
    /// Standard deviation σ of the frame noise.
    pub noise: f64,
    /// Fraction of videos built around a positional query.
    pub positional_rate: f64,
    pub queries_per_video: usize,
    /// Longest span named by a concept query, in segments.
    pub max_query_segments: usize,
    pub word_dim: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_videos: 250,
            val_fraction: 0.2,
            test_fraction: 0.0,
            min_segments: 5,
            max_segments: 6,
            frames_per_segment: 3,
            dim: 16,
            concepts: 24,
            noise: 0.1,
            positional_rate: 0.25,
            queries_per_video: 2,
            max_query_segments: 2,
            word_dim: 32,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Synthetic(m));
        for (name, v) in [
            ("num_videos", self.num_videos),
            ("min_segments", self.min_segments),
            ("frames_per_segment", self.frames_per_segment),
            ("dim", self.dim),
            ("concepts", self.concepts),
            ("queries_per_video", self.queries_per_video),
            ("max_query_segments", self.max_query_segments),
            ("word_dim", self.word_dim),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.max_segments < self.min_segments {
            return bad(format!(
                "max_segments {} is below min_segments {}",
                self.max_segments, self.min_segments
            ));
        }
        if self.concepts < self.max_segments {
            return bad(format!(
                "{} concepts cannot give {} segments distinct concepts",
                self.concepts, self.max_segments
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be >= 0, got {}", self.noise));
        }
        for (name, v) in [
            ("val_fraction", self.val_fraction),
            ("test_fraction", self.test_fraction),
            ("positional_rate", self.positional_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.val_fraction + self.test_fraction > 1.0 {
            return bad("val_fraction + test_fraction exceeds 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSummary {
    pub videos: BTreeMap<Split, usize>,
    pub queries: usize,
    pub positional_queries: usize,
    pub vocabulary: usize,
}

/// The corpus before it is written out.
pub(crate) struct SyntheticCorpus {
    pub videos: Vec<Video>,
    pub records: Vec<AnnotationRecord>,
    pub splits: BTreeMap<String, Split>,
    pub words: Vec<String>,
    pub word_table: Tensor2,
    /// Concept of every segment, per video.
    #[allow(dead_code)]
    pub segment_concepts: Vec<Vec<usize>>,
    #[allow(dead_code)]
    pub concept_features: [Tensor2; 2],
}

fn concept_name(c: usize) -> String {
    NOUNS.get(c).map_or_else(|| format!("thing{c}"), |n| n.to_string())
}

fn gaussian_table<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor2 {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor2::from_vec(rows, cols, data).expect("shape matches")
}

pub(crate) fn build(spec: &SyntheticSpec) -> Result<SyntheticCorpus, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let concept_features = [
        gaussian_table(spec.concepts, spec.dim, &mut rng),
        gaussian_table(spec.concepts, spec.dim, &mut rng),
    ];
    let mut words: Vec<String> = (0..spec.concepts).map(concept_name).collect();
    words.extend(["first", "last", "then"].map(String::from));
    let word_table = gaussian_table(words.len(), spec.word_dim, &mut rng);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| DataError::Synthetic(e.to_string()))?;

    let fps = spec.frames_per_segment;
    let mut videos = Vec::with_capacity(spec.num_videos);
    let mut records = Vec::new();
    let mut segment_concepts = Vec::with_capacity(spec.num_videos);
    let width = spec.num_videos.to_string().len().max(4);
    for i in 0..spec.num_videos {
        let id = format!("syn{i:0width$}");
        let n = rng.gen_range(spec.min_segments..=spec.max_segments);
        let positional = rng.gen_bool(spec.positional_rate);
        let mut concepts: Vec<usize> = (0..spec.concepts).collect();
        concepts.shuffle(&mut rng);
        let mut seg: Vec<usize> = concepts[..n].to_vec();
        if positional {
            seg[n - 1] = seg[0];
        }
        let frames = n * fps + rng.gen_range(0..fps);
        let modality = |m: Modality, table: &Tensor2, rng: &mut ChaCha8Rng| {
            let mut data = Vec::with_capacity(frames * spec.dim);
            for f in 0..frames {
                let c = seg[(f / fps).min(n - 1)];
                data.extend(table.row(c).iter().map(|v| v + noise.sample(rng)));
            }
            VideoFeatures::new(&id, m, Tensor2::from_vec(frames, spec.dim, data).expect("shape"), n, fps)
        };
        let rgb = modality(Modality::Rgb, &concept_features[0], &mut rng)?;
        let flow = modality(Modality::Flow, &concept_features[1], &mut rng)?;
        videos.push(Video::new(rgb, flow)?);

        for q in 0..spec.queries_per_video {
            let (span, description) = if positional {
                let name = concept_name(seg[0]);
                if rng.gen_bool(0.5) {
                    (Span::new(0, 0), format!("first {name}"))
                } else {
                    (Span::new(n - 1, n - 1), format!("last {name}"))
                }
            } else {
                let len = rng.gen_range(1..=spec.max_query_segments.min(n));
                let start = rng.gen_range(0..=n - len);
                let names: Vec<String> = seg[start..start + len].iter().map(|&c| concept_name(c)).collect();
                (Span::new(start, start + len - 1), names.join(" then "))
            };
            records.push(AnnotationRecord {
                annotation_id: (i * spec.queries_per_video + q).to_string(),
                video_id: id.clone(),
                description,
                times: vec![span; 4],
                num_segments: n,
                padded: false,
            });
        }
        segment_concepts.push(seg);
    }

    let mut order: Vec<usize> = (0..spec.num_videos).collect();
    order.shuffle(&mut rng);
    let n_val = (spec.val_fraction * spec.num_videos as f64).round() as usize;
    let n_test = ((spec.test_fraction * spec.num_videos as f64).round() as usize).min(spec.num_videos - n_val);
    let mut splits = BTreeMap::new();
    for (rank, &i) in order.iter().enumerate() {
        let split = if rank < n_val {
            Split::Val
        } else if rank < n_val + n_test {
            Split::Test
        } else {
            Split::Train
        };
        splits.insert(videos[i].id().to_string(), split);
    }
    Ok(SyntheticCorpus {
        videos,
        records,
        splits,
        words,
        word_table,
        segment_concepts,
        concept_features,
    })
}

/// Writes annotations, splits, index, word vectors and per-video feature
/// files under `dir`. Identical specs give byte-identical files.
pub fn generate_synthetic(spec: &SyntheticSpec, dir: &Path) -> Result<SyntheticSummary, DataError> {
    let corpus = build(spec)?;
    let features = dir.join("features");
    fs::create_dir_all(&features).map_err(io_error(&features))?;
    let mut index = Vec::with_capacity(corpus.videos.len());
    for v in &corpus.videos {
        let rgb = PathBuf::from("features").join(format!("{}.rgb.mcnf", v.id()));
        let flow = PathBuf::from("features").join(format!("{}.flow.mcnf", v.id()));
        write_features(&dir.join(&rgb), &v.rgb)?;
        write_features(&dir.join(&flow), &v.flow)?;
        index.push(IndexEntry {
            video_id: v.id().to_string(),
            rgb,
            flow,
        });
    }
    write_index(&dir.join("index.tsv"), &index)?;
    write_splits(&dir.join("splits.tsv"), &corpus.splits)?;
    write_annotations(&dir.join("annotations.json"), &corpus.records)?;
    let emb = dir.join("embeddings.txt");
    write_embeddings(&emb, &corpus.words, &corpus.word_table).map_err(io_error(&emb))?;

    let mut videos = BTreeMap::new();
    for s in corpus.splits.values() {
        *videos.entry(*s).or_insert(0) += 1;
    }
    Ok(SyntheticSummary {
        videos,
        queries: corpus.records.len(),
        positional_queries: corpus
            .records
            .iter()
            .filter(|r| is_positional(&r.description))
            .count(),
        vocabulary: corpus.words.len(),
    })
}

/// Whether a synthetic description is a positional query.
pub fn is_positional(description: &str) -> bool {
    description.starts_with("first ") || description.starts_with("last ")
}
