use crate::exec::Execution;
use crate::features::{build_context_input, build_context_inputs, pool_global, sliding_windows, Modality, Video};
use crate::language::EncoderCache;
use crate::moments::{enumerate_candidates, Span};
use crate::numerics::{squared_distance, Params};

use super::{BranchCache, ModelError, ModelGrads, ModelParams};

/// Examples per gradient chunk. Chunk boundaries do not depend on the thread
/// count, which keeps the reduced gradient bitwise reproducible.
pub(crate) const GRAD_CHUNK: usize = 8;

/// `max(0, x − y + margin)`
pub fn hinge(x: f64, y: f64, margin: f64) -> f64 {
    (x - y + margin).max(0.0)
}

/// `w_rgb·‖v − l‖² + w_flow·‖f − l‖²`
fn fused(w_rgb: f64, w_flow: f64, v: Option<&[f64]>, f: Option<&[f64]>, l: &[f64]) -> f64 {
    let dv = v.map_or(0.0, |v| w_rgb * squared_distance(v, l));
    let df = f.map_or(0.0, |f| w_flow * squared_distance(f, l));
    dv + df
}

/// A positive moment for one description.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub annotation_id: String,
    pub tokens: Vec<usize>,
    pub video_id: String,
    pub positive: Span,
}

/// Inter-video negatives drawn for one example: other videos scored at the
/// example's own span.
pub type Negatives<'a> = Vec<&'a Video>;

/// The embedded query and what its backward pass needs.
#[derive(Debug, Clone)]
pub struct QueryEmbedding {
    pub vector: Vec<f64>,
    cache: Option<EncoderCache>,
}

/// Summed loss terms over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatchLoss {
    /// `λ·intra + (1 − λ)·inter`
    pub total: f64,
    pub intra: f64,
    pub inter: f64,
    /// Smallest distance of any hinge argument or ReLU pre-activation from
    /// its kink. Finite differences are unreliable when this is tiny.
    pub min_kink: f64,
}

impl BatchLoss {
    fn add(&mut self, other: &BatchLoss) {
        self.total += other.total;
        self.intra += other.intra;
        self.inter += other.inter;
        self.min_kink = self.min_kink.min(other.min_kink);
    }

    fn empty() -> Self {
        BatchLoss {
            min_kink: f64::INFINITY,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LossWeights {
    pub intra: f64,
    pub inter: f64,
}

impl ModelParams {
    pub fn embed_query(&self, tokens: &[usize]) -> Result<QueryEmbedding, ModelError> {
        if self.config.language_free {
            return Ok(QueryEmbedding {
                vector: self.query_constant.clone(),
                cache: None,
            });
        }
        let (vector, cache) = self.encoder.forward(self.vocabulary.table(), tokens)?;
        Ok(QueryEmbedding {
            vector,
            cache: Some(cache),
        })
    }

    /// Embeds `span` of one modality's features into the joint space.
    pub fn embed_visual(
        &self,
        video: &Video,
        span: Span,
        modality: Modality,
    ) -> Result<Vec<f64>, ModelError> {
        let vf = video.modality(modality);
        let input = build_context_input(vf, span, self.config.features)?.to_vec();
        let branch = match modality {
            Modality::Rgb => &self.rgb,
            Modality::Flow => &self.flow,
        };
        Ok(branch.embed(&input)?)
    }

    /// Distance between a query embedding and one span.
    pub fn distance(&self, query: &[f64], video: &Video, span: Span) -> Result<f64, ModelError> {
        Ok(self.score_spans(query, video, &[span])?[0])
    }

    /// Distances of every span in `spans` to the query embedding.
    pub fn score_spans(
        &self,
        query: &[f64],
        video: &Video,
        spans: &[Span],
    ) -> Result<Vec<f64>, ModelError> {
        let (w_rgb, w_flow) = self.config.modalities.weights(self.config.eta);
        let rgb = if w_rgb > 0.0 {
            Some(self.embed_all(&self.rgb, video, Modality::Rgb, spans)?)
        } else {
            None
        };
        let flow = if w_flow > 0.0 {
            Some(self.embed_all(&self.flow, video, Modality::Flow, spans)?)
        } else {
            None
        };
        Ok((0..spans.len())
            .map(|k| {
                fused(
                    w_rgb,
                    w_flow,
                    rgb.as_ref().map(|e| e[k].as_slice()),
                    flow.as_ref().map(|e| e[k].as_slice()),
                    query,
                )
            })
            .collect())
    }

    fn embed_all(
        &self,
        branch: &super::VisualBranch,
        video: &Video,
        modality: Modality,
        spans: &[Span],
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        let inputs = build_context_inputs(video.modality(modality), spans, self.config.features)?;
        inputs
            .iter()
            .map(|x| branch.embed(x).map_err(ModelError::from))
            .collect()
    }

    fn forward_all(
        &self,
        modality: Modality,
        video: &Video,
        spans: &[Span],
    ) -> Result<Vec<(Vec<f64>, BranchCache)>, ModelError> {
        let branch = match modality {
            Modality::Rgb => &self.rgb,
            Modality::Flow => &self.flow,
        };
        let inputs = build_context_inputs(video.modality(modality), spans, self.config.features)?;
        inputs
            .iter()
            .map(|x| branch.forward(x).map_err(ModelError::from))
            .collect()
    }
}

/// Embeddings of one scored moment, with caches for the backward pass.
struct Scored {
    rgb: Option<(Vec<f64>, BranchCache)>,
    flow: Option<(Vec<f64>, BranchCache)>,
    distance: f64,
}

fn score_moments(
    params: &ModelParams,
    video: &Video,
    spans: &[Span],
    query: &[f64],
    kink: &mut f64,
) -> Result<Vec<Scored>, ModelError> {
    let (w_rgb, w_flow) = params.config.modalities.weights(params.config.eta);
    let track = params.config.activation == super::Activation::Relu;
    let mut rgb = if w_rgb > 0.0 {
        params.forward_all(Modality::Rgb, video, spans)?.into_iter().map(Some).collect()
    } else {
        vec![None; spans.len()]
    };
    let mut flow = if w_flow > 0.0 {
        params.forward_all(Modality::Flow, video, spans)?.into_iter().map(Some).collect()
    } else {
        vec![None; spans.len()]
    };
    let mut out = Vec::with_capacity(spans.len());
    for k in 0..spans.len() {
        let r: Option<(Vec<f64>, BranchCache)> = rgb[k].take();
        let f: Option<(Vec<f64>, BranchCache)> = flow[k].take();
        if track {
            for (_, c) in r.iter().chain(f.iter()) {
                for p in &c.pre_activation {
                    *kink = kink.min(p.abs());
                }
            }
        }
        let distance = fused(
            w_rgb,
            w_flow,
            r.as_ref().map(|(e, _)| e.as_slice()),
            f.as_ref().map(|(e, _)| e.as_slice()),
            query,
        );
        if !distance.is_finite() {
            return Err(ModelError::Divergence(format!(
                "non-finite distance for {} in `{}`",
                spans[k],
                video.id()
            )));
        }
        out.push(Scored {
            rgb: r,
            flow: f,
            distance,
        });
    }
    Ok(out)
}

/// Loss terms of one example; accumulates `∂(w_intra·intra + w_inter·inter)/∂θ`
/// into `grads` when given. Terms with zero weight are not evaluated.
pub(crate) fn example_loss(
    params: &ModelParams,
    example: &TrainingExample,
    video: &Video,
    negatives: &[&Video],
    weights: LossWeights,
    grads: Option<&mut ModelGrads>,
) -> Result<BatchLoss, ModelError> {
    let cfg = &params.config;
    let margin = cfg.margin;
    if video.id() != example.video_id {
        return Err(ModelError::Configuration(format!(
            "example `{}` refers to video `{}` but was given `{}`",
            example.annotation_id,
            example.video_id,
            video.id()
        )));
    }
    example.positive.validate(video.num_segments()).map_err(crate::features::FeatureError::from)?;
    let query = params.embed_query(&example.tokens)?;
    let l = &query.vector;
    let mut kink = f64::INFINITY;

    let spans = if weights.intra > 0.0 {
        enumerate_candidates(video.num_segments()).map_err(crate::features::FeatureError::from)?
    } else {
        vec![example.positive]
    };
    let pos = spans
        .iter()
        .position(|&s| s == example.positive)
        .expect("positive span is a candidate");
    let own = score_moments(params, video, &spans, l, &mut kink)?;
    let d_pos = own[pos].distance;
    let mut d_own = vec![0.0; own.len()];

    let mut intra = 0.0;
    if weights.intra > 0.0 {
        for (n, s) in own.iter().enumerate() {
            if n == pos {
                continue;
            }
            let arg = d_pos - s.distance + margin;
            kink = kink.min(arg.abs());
            if arg > 0.0 {
                intra += arg;
                d_own[pos] += weights.intra;
                d_own[n] -= weights.intra;
            }
        }
    }

    let mut inter = 0.0;
    let mut others = Vec::new();
    if weights.inter > 0.0 {
        for neg in negatives {
            if neg.id() == video.id() {
                return Err(ModelError::Configuration(format!(
                    "inter-video negative for `{}` drawn from its own video",
                    example.annotation_id
                )));
            }
            let scored = score_moments(params, neg, &[example.positive], l, &mut kink)?
                .pop()
                .expect("one span scored");
            let arg = d_pos - scored.distance + margin;
            kink = kink.min(arg.abs());
            let mut d = 0.0;
            if arg > 0.0 {
                inter += arg;
                d_own[pos] += weights.inter;
                d = -weights.inter;
            }
            others.push((scored, d));
        }
    }

    if let Some(grads) = grads {
        let (w_rgb, w_flow) = cfg.modalities.weights(cfg.eta);
        let mut dl = vec![0.0; l.len()];
        let items = own.iter().zip(d_own.iter().copied()).chain(others.iter().map(|(s, d)| (s, *d)));
        for (scored, dd) in items {
            if dd == 0.0 {
                continue;
            }
            if let Some((v, cache)) = &scored.rgb {
                let g: Vec<f64> = v.iter().zip(l).map(|(a, b)| dd * 2.0 * w_rgb * (a - b)).collect();
                params.rgb.backward(cache, &g, &mut grads.rgb)?;
                dl.iter_mut().zip(&g).for_each(|(x, y)| *x -= y);
            }
            if let Some((f, cache)) = &scored.flow {
                let g: Vec<f64> = f.iter().zip(l).map(|(a, b)| dd * 2.0 * w_flow * (a - b)).collect();
                params.flow.backward(cache, &g, &mut grads.flow)?;
                dl.iter_mut().zip(&g).for_each(|(x, y)| *x -= y);
            }
        }
        match &query.cache {
            None => grads.query_constant.iter_mut().zip(&dl).for_each(|(x, y)| *x += y),
            Some(cache) => {
                params
                    .encoder
                    .backward(cache, &dl, &mut grads.encoder, grads.words.as_mut())?
            }
        }
    }

    Ok(BatchLoss {
        total: weights.intra * intra + weights.inter * inter,
        intra,
        inter,
        min_kink: kink,
    })
}

/// Intra-video ranking loss: the positive against every other candidate of
/// the same video.
pub fn intra_loss(
    params: &ModelParams,
    example: &TrainingExample,
    video: &Video,
) -> Result<f64, ModelError> {
    let w = LossWeights {
        intra: 1.0,
        inter: 0.0,
    };
    Ok(example_loss(params, example, video, &[], w, None)?.intra)
}

/// Inter-video ranking loss: the positive against the same span in each
/// negative video.
pub fn inter_loss(
    params: &ModelParams,
    example: &TrainingExample,
    video: &Video,
    negatives: &[&Video],
) -> Result<f64, ModelError> {
    let w = LossWeights {
        intra: 0.0,
        inter: 1.0,
    };
    Ok(example_loss(params, example, video, negatives, w, None)?.inter)
}

/// One example of a batch with its resolved videos.
#[derive(Debug, Clone)]
pub struct BatchItem<'a> {
    pub example: &'a TrainingExample,
    pub video: &'a Video,
    pub negatives: Negatives<'a>,
}

fn weights_of(params: &ModelParams) -> LossWeights {
    LossWeights {
        intra: params.config.lambda,
        inter: 1.0 - params.config.lambda,
    }
}

/// `λ·Σ intra + (1 − λ)·Σ inter` over the batch.
pub fn combined_loss(params: &ModelParams, batch: &[BatchItem<'_>]) -> Result<BatchLoss, ModelError> {
    let w = weights_of(params);
    let mut acc = BatchLoss::empty();
    for item in batch {
        acc.add(&example_loss(params, item.example, item.video, &item.negatives, w, None)?);
    }
    Ok(acc)
}

/// Combined loss and its gradient summed over the batch.
pub fn combined_loss_and_grads(
    params: &ModelParams,
    batch: &[BatchItem<'_>],
    exec: Execution,
) -> Result<(BatchLoss, ModelGrads), ModelError> {
    let w = weights_of(params);
    let chunks: Vec<&[BatchItem<'_>]> = batch.chunks(GRAD_CHUNK).collect();
    let partial = exec.map(&chunks, |chunk| -> Result<(BatchLoss, ModelGrads), ModelError> {
        let mut grads = params.zero_grads();
        let mut loss = BatchLoss::empty();
        for item in chunk.iter() {
            let l = example_loss(params, item.example, item.video, &item.negatives, w, Some(&mut grads))?;
            loss.add(&l);
        }
        Ok((loss, grads))
    });
    let mut loss = BatchLoss::empty();
    let mut grads = params.zero_grads();
    for p in partial {
        let (l, g) = p?;
        loss.add(&l);
        grads.accumulate(&g)?;
    }
    Ok((loss, grads))
}

/// All candidates of `video` ranked by ascending distance; ties keep
/// `(start, end)` order.
pub fn localize(
    params: &ModelParams,
    tokens: &[usize],
    video: &Video,
) -> Result<Vec<(Span, f64)>, ModelError> {
    let query = params.embed_query(tokens)?;
    let spans = enumerate_candidates(video.num_segments()).map_err(crate::features::FeatureError::from)?;
    let scores = params.score_spans(&query.vector, video, &spans)?;
    let mut ranked: Vec<(Span, f64)> = spans.into_iter().zip(scores).collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ok(ranked)
}

/// Distance of a query to one frame window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowScore {
    pub start_frame: usize,
    pub end_frame: usize,
    pub distance: f64,
}

/// Scores sliding frame windows instead of segment spans, in start order.
/// There are `⌊(T − window)/stride⌋ + 1` of them for a `T`-frame video.
pub fn localize_windows(
    params: &ModelParams,
    tokens: &[usize],
    video: &Video,
    window_frames: usize,
    stride_frames: usize,
) -> Result<Vec<WindowScore>, ModelError> {
    let query = params.embed_query(tokens)?;
    let (w_rgb, w_flow) = params.config.modalities.weights(params.config.eta);
    let flags = params.config.features;
    let embed = |modality: Modality, branch: &super::VisualBranch| -> Result<Vec<(usize, usize, Vec<f64>)>, ModelError> {
        let vf = video.modality(modality);
        let global = pool_global(vf)?;
        sliding_windows(vf, window_frames, stride_frames)?
            .into_iter()
            .map(|w| {
                let e = branch.embed(&w.context_input(&global, flags).to_vec())?;
                Ok((w.start_frame, w.end_frame, e))
            })
            .collect()
    };
    let rgb = embed(Modality::Rgb, &params.rgb)?;
    let flow = embed(Modality::Flow, &params.flow)?;
    Ok(rgb
        .iter()
        .zip(&flow)
        .map(|((start, end, v), (_, _, f))| WindowScore {
            start_frame: *start,
            end_frame: *end,
            distance: fused(
                w_rgb,
                w_flow,
                (w_rgb > 0.0).then_some(v.as_slice()),
                (w_flow > 0.0).then_some(f.as_slice()),
                &query.vector,
            ),
        })
        .collect())
}

/// Distance of a query to one span: the fused squared distance of its rgb and
/// flow embeddings to the query embedding.
pub fn distance(
    params: &ModelParams,
    tokens: &[usize],
    video: &Video,
    span: Span,
) -> Result<f64, ModelError> {
    let q = params.embed_query(tokens)?;
    params.distance(&q.vector, video, span)
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::super::{Activation, ModelConfig, Modalities};
    use super::*;
    use crate::numerics::{grad_check, GradCheckConfig, Linear, Tensor2};

    fn params(seed: u64) -> ModelParams {
        ModelParams::init(small_config(3, 2), vocabulary(6, 2, seed), seed).unwrap()
    }

    fn example(video: &Video, span: Span) -> TrainingExample {
        TrainingExample {
            annotation_id: "q".into(),
            tokens: vec![0, 3, 2],
            video_id: video.id().into(),
            positive: span,
        }
    }

    #[test]
    fn hinge_cases() {
        assert_eq!(hinge(0.5, 1.0, 0.1), 0.0);
        assert!((hinge(1.0, 0.5, 0.1) - 0.6).abs() < 1e-15);
        assert_eq!(hinge(0.7, 0.7, 0.1), 0.1);
    }

    #[test]
    fn fused_distance_cases() {
        let l = [0.0, 0.0];
        let one = [1.0, 0.0];
        assert!((fused(1.0, 2.33, Some(&one), Some(&one), &l) - 3.33).abs() < 1e-12);
        assert_eq!(fused(1.0, 2.33, Some(&l), Some(&l), &l), 0.0);
        assert_eq!(fused(1.0, 0.0, Some(&one), Some(&[5.0, 5.0]), &l), 1.0);
    }

    #[test]
    fn distance_matches_definition() {
        let p = params(3);
        let v = video("a", 6, 2, 3, 1);
        let q = p.embed_query(&[1, 2]).unwrap();
        let span = Span::new(1, 3);
        let ev = p.embed_visual(&v, span, Modality::Rgb).unwrap();
        let ef = p.embed_visual(&v, span, Modality::Flow).unwrap();
        let expected = squared_distance(&ev, &q.vector) + 2.33 * squared_distance(&ef, &q.vector);
        assert!((p.distance(&q.vector, &v, span).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn single_segment_video() {
        let p = params(1);
        let v = video("a", 1, 3, 3, 2);
        let ranked = localize(&p, &[0], &v).unwrap();
        assert_eq!(ranked.len(), 1);
        assert_eq!(intra_loss(&p, &example(&v, Span::new(0, 0)), &v).unwrap(), 0.0);
    }

    #[test]
    fn localize_sorted_and_complete() {
        let p = params(9);
        let v = video("a", 6, 2, 3, 4);
        let ranked = localize(&p, &[1, 4], &v).unwrap();
        assert_eq!(ranked.len(), 21);
        assert!(ranked.windows(2).all(|w| w[0].1 <= w[1].1));
    }

    #[test]
    fn localize_tie_break_by_span_order() {
        let mut p = params(2);
        for b in [&mut p.rgb, &mut p.flow] {
            b.second = Linear::zeros(b.second.inputs(), b.second.outputs());
        }
        let v = video("a", 3, 1, 3, 1);
        let ranked: Vec<Span> = localize(&p, &[0], &v).unwrap().into_iter().map(|r| r.0).collect();
        assert_eq!(ranked, enumerate_candidates(3).unwrap());
    }

    #[test]
    fn inter_loss_empty_without_negatives() {
        let p = params(1);
        let v = video("a", 5, 2, 3, 2);
        assert_eq!(inter_loss(&p, &example(&v, Span::new(1, 2)), &v, &[]).unwrap(), 0.0);
    }

    #[test]
    fn inter_negative_from_own_video_rejected() {
        let p = params(1);
        let v = video("a", 5, 2, 3, 2);
        assert!(inter_loss(&p, &example(&v, Span::new(1, 2)), &v, &[&v]).is_err());
    }

    #[test]
    fn intra_loss_is_sum_of_hinges() {
        let p = params(5);
        let v = video("a", 4, 2, 3, 8);
        let ex = example(&v, Span::new(1, 2));
        let q = p.embed_query(&ex.tokens).unwrap();
        let spans = enumerate_candidates(4).unwrap();
        let d = p.score_spans(&q.vector, &v, &spans).unwrap();
        let pos = spans.iter().position(|&s| s == ex.positive).unwrap();
        let expected: f64 = (0..spans.len())
            .filter(|&n| n != pos)
            .map(|n| hinge(d[pos], d[n], 0.1))
            .sum();
        assert!((intra_loss(&p, &ex, &v).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn combined_weights() {
        let v = video("a", 4, 2, 3, 8);
        let w = video("b", 5, 2, 3, 9);
        for lambda in [0.0, 0.3, 1.0] {
            let mut cfg = small_config(3, 2);
            cfg.lambda = lambda;
            let p = ModelParams::init(cfg, vocabulary(6, 2, 1), 4).unwrap();
            let ex = example(&v, Span::new(0, 1));
            let intra = intra_loss(&p, &ex, &v).unwrap();
            let inter = inter_loss(&p, &ex, &v, &[&w]).unwrap();
            let batch = [BatchItem {
                example: &ex,
                video: &v,
                negatives: vec![&w],
            }];
            let total = combined_loss(&p, &batch).unwrap().total;
            assert!((total - (lambda * intra + (1.0 - lambda) * inter)).abs() < 1e-12);
        }
    }

    /// `None` when the draw sits too close to a hinge or ReLU kink.
    fn toy_batch_grad_check(cfg: ModelConfig, seed: u64) -> Option<crate::numerics::GradCheckReport> {
        let v = video("a", 4, 2, 3, seed);
        let w = video("b", 5, 2, 3, seed + 100);
        let ex_a = TrainingExample {
            annotation_id: "qa".into(),
            tokens: vec![0, 3, 2],
            video_id: "a".into(),
            positive: Span::new(1, 2),
        };
        let ex_b = TrainingExample {
            annotation_id: "qb".into(),
            tokens: vec![5, 1],
            video_id: "b".into(),
            positive: Span::new(0, 0),
        };
        let p = ModelParams::init(cfg, vocabulary(6, 2, seed), seed).unwrap();
        let batch = [
            BatchItem {
                example: &ex_a,
                video: &v,
                negatives: vec![&w],
            },
            BatchItem {
                example: &ex_b,
                video: &w,
                negatives: vec![&v],
            },
        ];
        let (loss, grads) = combined_loss_and_grads(&p, &batch, Execution::Sequential).unwrap();
        assert!(loss.total > 0.0);
        if loss.min_kink < 1e-3 {
            return None;
        }
        let point = p.flatten();
        let mut probe = p.clone();
        Some(grad_check(
            |x| {
                probe.assign_flat(x).unwrap();
                combined_loss(&probe, &batch).unwrap().total
            },
            &point,
            &grads.flatten(),
            &GradCheckConfig::default(),
        ))
    }

    #[test]
    fn full_loss_gradient_on_toy_batch() {
        for lf in [false, true] {
            let mut cfg = small_config(3, 2);
            cfg.language_free = lf;
            cfg.fine_tune_words = true;
            cfg.margin = 0.5;
            let r = (0..50)
                .find_map(|seed| toy_batch_grad_check(cfg.clone(), seed))
                .expect("a kink-free draw");
            assert!(r.passed, "language_free={lf}: {r:?}");
        }
    }

    #[test]
    fn segment_windows_match_single_segment_spans() {
        let p = params(4);
        let v = video("a", 5, 3, 3, 11);
        let w = localize_windows(&p, &[1, 2], &v, 3, 3).unwrap();
        assert_eq!(w.len(), 5);
        for (s, ws) in w.iter().enumerate() {
            assert_eq!((ws.start_frame, ws.end_frame), (3 * s, 3 * s + 3));
            let d = distance(&p, &[1, 2], &v, Span::new(s, s)).unwrap();
            assert!((ws.distance - d).abs() < 1e-12);
        }
        // ⌊(15 − 4)/2⌋ + 1
        assert_eq!(localize_windows(&p, &[1], &v, 4, 2).unwrap().len(), 6);
        assert!(localize_windows(&p, &[1], &v, 4, 0).is_err());
    }

    #[test]
    fn linear_branch_is_shift_invariant() {
        let mut cfg = small_config(3, 2);
        cfg.activation = Activation::Identity;
        cfg.modalities = Modalities::Both;
        let mut p = ModelParams::init(cfg, vocabulary(6, 2, 2), 2).unwrap();
        for b in [&mut p.rgb, &mut p.flow] {
            b.first.bias.iter_mut().for_each(|x| *x = 0.0);
            b.second.bias.iter_mut().for_each(|x| *x = 0.0);
        }
        let shift = |v: &Video, c: f64| {
            let mk = |vf: &crate::features::VideoFeatures| {
                let data = vf.frames().data().iter().map(|x| x + c).collect();
                crate::features::VideoFeatures::new(
                    vf.video_id(),
                    vf.modality(),
                    Tensor2::from_vec(vf.num_frames(), vf.dim(), data).unwrap(),
                    vf.num_segments(),
                    vf.frames_per_segment(),
                )
                .unwrap()
            };
            Video::new(mk(&v.rgb), mk(&v.flow)).unwrap()
        };
        let v = video("a", 5, 2, 3, 1);
        let w = video("b", 5, 2, 3, 2);
        let ex = example(&v, Span::new(2, 3));
        let before = [intra_loss(&p, &ex, &v).unwrap(), inter_loss(&p, &ex, &v, &[&w]).unwrap()];
        let (vs, ws) = (shift(&v, 0.75), shift(&w, 0.75));
        // Shifting the frames shifts every embedding by one vector; shift the
        // query embedding identically through the constant of a language-free
        // copy to compare like with like.
        let q = p.embed_query(&ex.tokens).unwrap().vector;
        let probe = p.embed_visual(&v, ex.positive, Modality::Rgb).unwrap();
        let probe_s = p.embed_visual(&vs, ex.positive, Modality::Rgb).unwrap();
        let delta: Vec<f64> = probe_s.iter().zip(&probe).map(|(a, b)| a - b).collect();
        for span in enumerate_candidates(5).unwrap() {
            let a = p.embed_visual(&v, span, Modality::Rgb).unwrap();
            let b = p.embed_visual(&vs, span, Modality::Rgb).unwrap();
            for k in 0..a.len() {
                assert!((b[k] - a[k] - delta[k]).abs() < 1e-12);
            }
        }
        let mut lf = p.clone();
        lf.config.language_free = true;
        lf.query_constant = q.clone();
        let mut lf_s = lf.clone();
        lf_s.query_constant = q.iter().zip(&delta).map(|(a, b)| a + b).collect();
        // rgb-only so a single shift vector applies
        lf.config.modalities = Modalities::Rgb;
        lf_s.config.modalities = Modalities::Rgb;
        let a = [intra_loss(&lf, &ex, &v).unwrap(), inter_loss(&lf, &ex, &v, &[&w]).unwrap()];
        let ex_s = example(&vs, ex.positive);
        let b = [intra_loss(&lf_s, &ex_s, &vs).unwrap(), inter_loss(&lf_s, &ex_s, &vs, &[&ws]).unwrap()];
        for k in 0..2 {
            assert!((a[k] - b[k]).abs() < 1e-9, "{a:?} vs {b:?}");
        }
        assert!(before.iter().all(|x| x.is_finite()));
    }
}
