//! Evaluation protocol and annotation-only baselines.
//!
//! A query's score for a metric is the best mean, over every way of leaving
//! one of its four annotations out, of the per-annotation metric. R@k counts
//! an annotation when its exact span is among the top k; mIoU uses the IoU of
//! the top-1 span with each annotation.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::features::VideoSet;
use crate::language::Query;
use crate::model::{localize, ModelError, ModelParams};
use crate::moments::{enumerate_candidates, temporal_iou, MomentError, Span};

/// Annotations per query the protocol expects.
pub const ANNOTATIONS_PER_QUERY: usize = 4;
pub const DEFAULT_CHANCE_TRIALS: usize = 10_000;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Moment(#[from] MomentError),
    #[error("query `{id}` has {found} annotations; scoring needs {ANNOTATIONS_PER_QUERY}")]
    Arity { id: String, found: usize },
    #[error("no features for videos: {}", .0.join(", "))]
    MissingVideos(Vec<String>),
    #[error("invalid ranking for query `{id}`: {reason}")]
    Ranking { id: String, reason: String },
    #[error("chance baseline needs at least one trial")]
    NoTrials,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    RecallAt(usize),
    MeanIou,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub r1: f64,
    pub r5: f64,
    pub miou: f64,
}

impl Metrics {
    fn add(&mut self, o: &Metrics) {
        self.r1 += o.r1;
        self.r5 += o.r5;
        self.miou += o.miou;
    }

    fn scaled(&self, f: f64) -> Metrics {
        Metrics {
            r1: self.r1 * f,
            r5: self.r5 * f,
            miou: self.miou * f,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryScore {
    pub annotation_id: String,
    pub video: String,
    pub r1: f64,
    pub r5: f64,
    pub miou: f64,
    /// Absent for baselines that average over many rankings.
    pub top1: Option<Span>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: Metrics,
    pub per_query: Vec<QueryScore>,
    pub config: BTreeMap<String, String>,
}

impl EvalReport {
    fn from_scores(per_query: Vec<QueryScore>, config: BTreeMap<String, String>) -> Self {
        let mut sum = Metrics::default();
        for q in &per_query {
            sum.add(&Metrics {
                r1: q.r1,
                r5: q.r5,
                miou: q.miou,
            });
        }
        let n = per_query.len();
        let metrics = if n == 0 { sum } else { sum.scaled(1.0 / n as f64) };
        Self {
            metrics,
            per_query,
            config,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn table_header() -> String {
        format!("{:<28} {:>7} {:>7} {:>7}", "method", "R@1", "R@5", "mIoU")
    }

    /// One aligned row, metrics ×100.
    pub fn table_row(&self, name: &str) -> String {
        format!(
            "{:<28} {:>7.2} {:>7.2} {:>7.2}",
            name,
            100.0 * self.metrics.r1,
            100.0 * self.metrics.r5,
            100.0 * self.metrics.miou
        )
    }
}

fn check_arity(id: &str, annotations: &[Span]) -> Result<(), EvalError> {
    if annotations.len() != ANNOTATIONS_PER_QUERY {
        return Err(EvalError::Arity {
            id: id.to_string(),
            found: annotations.len(),
        });
    }
    Ok(())
}

fn per_annotation(ranked: &[Span], a: Span, metric: Metric) -> f64 {
    match metric {
        Metric::RecallAt(k) => f64::from(u8::from(ranked.iter().take(k).any(|&s| s == a))),
        Metric::MeanIou => ranked.first().map_or(0.0, |&top| temporal_iou(top, a)),
    }
}

/// Best mean of the metric over the annotation triples.
fn best_triple(values: [f64; ANNOTATIONS_PER_QUERY]) -> f64 {
    (0..ANNOTATIONS_PER_QUERY)
        .map(|skip| {
            let sum: f64 = (0..ANNOTATIONS_PER_QUERY)
                .filter(|&i| i != skip)
                .map(|i| values[i])
                .sum();
            sum / 3.0
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn score_prediction(ranked: &[Span], annotations: &[Span], metric: Metric) -> Result<f64, EvalError> {
    check_arity("<prediction>", annotations)?;
    let mut v = [0.0; ANNOTATIONS_PER_QUERY];
    for (slot, &a) in v.iter_mut().zip(annotations) {
        *slot = per_annotation(ranked, a, metric);
    }
    Ok(best_triple(v))
}

/// R@1, R@5 and mIoU of one ranking.
pub fn score_ranking(ranked: &[Span], annotations: &[Span]) -> Result<Metrics, EvalError> {
    Ok(Metrics {
        r1: score_prediction(ranked, annotations, Metric::RecallAt(1))?,
        r5: score_prediction(ranked, annotations, Metric::RecallAt(5))?,
        miou: score_prediction(ranked, annotations, Metric::MeanIou)?,
    })
}

/// Anything that orders the candidate moments of a query.
pub trait RankingSource: Sync {
    /// Full candidate ordering for the query, best first.
    fn rank(&self, query: &Query, videos: &VideoSet) -> Result<Vec<Span>, EvalError>;

    fn needs_features(&self) -> bool {
        false
    }
}

pub struct ModelRanker<'a> {
    params: &'a ModelParams,
}

impl<'a> ModelRanker<'a> {
    pub fn new(params: &'a ModelParams) -> Self {
        Self { params }
    }
}

impl RankingSource for ModelRanker<'_> {
    fn rank(&self, query: &Query, videos: &VideoSet) -> Result<Vec<Span>, EvalError> {
        let video = videos
            .get(&query.video_id)
            .ok_or_else(|| EvalError::MissingVideos(vec![query.video_id.clone()]))?;
        Ok(localize(self.params, &query.tokens, video)?
            .into_iter()
            .map(|(s, _)| s)
            .collect())
    }

    fn needs_features(&self) -> bool {
        true
    }
}

/// Candidates ranked by how often annotators marked each exact span in the
/// training data; ties and unseen spans fall back to `(start, end)` order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MomentPrior {
    counts: BTreeMap<Span, usize>,
}

impl MomentPrior {
    /// Counts every annotator span, not just the consensus.
    pub fn fit(train: &[Query]) -> Self {
        let mut counts = BTreeMap::new();
        for q in train {
            for &s in &q.annotations {
                *counts.entry(s).or_insert(0) += 1;
            }
        }
        Self { counts }
    }

    pub fn count(&self, span: Span) -> usize {
        self.counts.get(&span).copied().unwrap_or(0)
    }

    pub fn ranking(&self, num_segments: usize) -> Result<Vec<Span>, EvalError> {
        let mut spans = enumerate_candidates(num_segments)?;
        spans.sort_by(|a, b| self.count(*b).cmp(&self.count(*a)).then(a.cmp(b)));
        Ok(spans)
    }
}

impl RankingSource for MomentPrior {
    fn rank(&self, query: &Query, _videos: &VideoSet) -> Result<Vec<Span>, EvalError> {
        self.ranking(query.num_segments)
    }
}

fn validate_ranking(query: &Query, ranked: &[Span]) -> Result<(), EvalError> {
    let expected: BTreeSet<Span> = enumerate_candidates(query.num_segments)?.into_iter().collect();
    let got: BTreeSet<Span> = ranked.iter().copied().collect();
    if got.len() != ranked.len() || got != expected {
        return Err(EvalError::Ranking {
            id: query.annotation_id.clone(),
            reason: format!(
                "expected a permutation of the {} candidates, got {} spans",
                expected.len(),
                ranked.len()
            ),
        });
    }
    Ok(())
}

/// Scores every query; aggregates are means summed in query order.
pub fn evaluate<S: RankingSource + ?Sized>(
    source: &S,
    queries: &[Query],
    videos: &VideoSet,
    exec: Execution,
) -> Result<EvalReport, EvalError> {
    if source.needs_features() {
        let missing: BTreeSet<String> = queries
            .iter()
            .filter(|q| !videos.contains_key(&q.video_id))
            .map(|q| q.video_id.clone())
            .collect();
        if !missing.is_empty() {
            return Err(EvalError::MissingVideos(missing.into_iter().collect()));
        }
    }
    let scores = exec.map(queries, |q| -> Result<QueryScore, EvalError> {
        check_arity(&q.annotation_id, &q.annotations)?;
        let ranked = source.rank(q, videos)?;
        validate_ranking(q, &ranked)?;
        let m = score_ranking(&ranked, &q.annotations)?;
        Ok(QueryScore {
            annotation_id: q.annotation_id.clone(),
            video: q.video_id.clone(),
            r1: m.r1,
            r5: m.r5,
            miou: m.miou,
            top1: ranked.first().copied(),
        })
    });
    Ok(EvalReport::from_scores(
        scores.into_iter().collect::<Result<_, _>>()?,
        BTreeMap::new(),
    ))
}

fn combinations(items: &[Span], k: usize) -> Vec<Vec<Span>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    if items.len() < k {
        return Vec::new();
    }
    let mut out = Vec::new();
    for (i, &first) in items.iter().enumerate() {
        for mut rest in combinations(&items[i + 1..], k - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

/// Best achievable scores given annotator disagreement.
pub fn upper_bound_scores(query: &Query) -> Result<(Metrics, Span), EvalError> {
    check_arity(&query.annotation_id, &query.annotations)?;
    let candidates = enumerate_candidates(query.num_segments)?;
    let mut best_r1 = (f64::NEG_INFINITY, candidates[0]);
    let mut best_miou = f64::NEG_INFINITY;
    for &c in &candidates {
        let r1 = score_prediction(&[c], &query.annotations, Metric::RecallAt(1))?;
        let miou = score_prediction(&[c], &query.annotations, Metric::MeanIou)?;
        if r1 > best_r1.0 {
            best_r1 = (r1, c);
        }
        best_miou = best_miou.max(miou);
    }
    // Only annotation spans can count toward R@5, so the best top five is
    // drawn from them (all of them when there are at most five).
    let distinct: Vec<Span> = query
        .annotations
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .filter(|s| s.is_valid_for(query.num_segments))
        .collect();
    let k = distinct.len().min(5);
    let mut best_r5 = 0.0_f64;
    for top in combinations(&distinct, k) {
        best_r5 = best_r5.max(score_prediction(&top, &query.annotations, Metric::RecallAt(5))?);
    }
    Ok((
        Metrics {
            r1: best_r1.0,
            r5: best_r5,
            miou: best_miou,
        },
        best_r1.1,
    ))
}

pub fn baseline_upper_bound(queries: &[Query], exec: Execution) -> Result<EvalReport, EvalError> {
    let scores = exec.map(queries, |q| -> Result<QueryScore, EvalError> {
        let (m, top) = upper_bound_scores(q)?;
        Ok(QueryScore {
            annotation_id: q.annotation_id.clone(),
            video: q.video_id.clone(),
            r1: m.r1,
            r5: m.r5,
            miou: m.miou,
            top1: Some(top),
        })
    });
    let mut config = BTreeMap::new();
    config.insert("baseline".into(), "upper_bound".into());
    Ok(EvalReport::from_scores(
        scores.into_iter().collect::<Result<_, _>>()?,
        config,
    ))
}

/// Uniformly random rankings, `trials` per query, metrics averaged. Query `i`
/// draws from its own stream of the seeded generator, so the result does not
/// depend on scheduling.
pub fn baseline_chance(
    queries: &[Query],
    seed: u64,
    trials: usize,
    exec: Execution,
) -> Result<EvalReport, EvalError> {
    if trials == 0 {
        return Err(EvalError::NoTrials);
    }
    let scores = exec.map_range(queries.len(), |i| -> Result<QueryScore, EvalError> {
        let q = &queries[i];
        check_arity(&q.annotation_id, &q.annotations)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut spans = enumerate_candidates(q.num_segments)?;
        let mut sum = Metrics::default();
        for _ in 0..trials {
            let (top, _) = spans.partial_shuffle(&mut rng, 5);
            sum.add(&score_ranking(top, &q.annotations)?);
        }
        let m = sum.scaled(1.0 / trials as f64);
        Ok(QueryScore {
            annotation_id: q.annotation_id.clone(),
            video: q.video_id.clone(),
            r1: m.r1,
            r5: m.r5,
            miou: m.miou,
            top1: None,
        })
    });
    let mut config = BTreeMap::new();
    config.insert("baseline".into(), "chance".into());
    config.insert("seed".into(), seed.to_string());
    config.insert("trials".into(), trials.to_string());
    Ok(EvalReport::from_scores(
        scores.into_iter().collect::<Result<_, _>>()?,
        config,
    ))
}

pub fn baseline_moment_prior(
    train: &[Query],
    eval: &[Query],
    exec: Execution,
) -> Result<EvalReport, EvalError> {
    let prior = MomentPrior::fit(train);
    let mut report = evaluate(&prior, eval, &VideoSet::new(), exec)?;
    report.config.insert("baseline".into(), "prior".into());
    report.config.insert("train_queries".into(), train.len().to_string());
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieved {
    pub video: String,
    pub span: Span,
    pub distance: f64,
}

/// The `k` moments closest to the query across all videos; ties by
/// `(video id, start, end)`. Returns everything when `k` exceeds the total.
pub fn retrieve_corpus(
    params: &ModelParams,
    tokens: &[usize],
    videos: &VideoSet,
    k: usize,
    exec: Execution,
) -> Result<Vec<Retrieved>, EvalError> {
    let query = params.embed_query(tokens)?;
    let list: Vec<_> = videos.values().collect();
    let per_video = exec.map(&list, |v| -> Result<Vec<Retrieved>, EvalError> {
        let spans = enumerate_candidates(v.num_segments())?;
        let d = params.score_spans(&query.vector, v, &spans)?;
        Ok(spans
            .into_iter()
            .zip(d)
            .map(|(span, distance)| Retrieved {
                video: v.id().to_string(),
                span,
                distance,
            })
            .collect())
    });
    let mut all = Vec::new();
    for r in per_video {
        all.extend(r?);
    }
    all.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then_with(|| a.video.cmp(&b.video))
            .then(a.span.cmp(&b.span))
    });
    all.truncate(k);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(a: usize, b: usize) -> Span {
        Span::new(a, b)
    }

    fn query(id: &str, n: usize, annotations: Vec<Span>) -> Query {
        Query {
            annotation_id: id.into(),
            description: String::new(),
            tokens: vec![0],
            video_id: format!("v{id}"),
            num_segments: n,
            annotations,
        }
    }

    struct Fixed(Vec<Span>);

    impl RankingSource for Fixed {
        fn rank(&self, q: &Query, _: &VideoSet) -> Result<Vec<Span>, EvalError> {
            let mut rest: Vec<Span> = enumerate_candidates(q.num_segments)?
                .into_iter()
                .filter(|c| !self.0.contains(c))
                .collect();
            let mut out = self.0.clone();
            out.append(&mut rest);
            Ok(out)
        }
    }

    struct Oracle;

    impl RankingSource for Oracle {
        fn rank(&self, q: &Query, v: &VideoSet) -> Result<Vec<Span>, EvalError> {
            let c = crate::moments::consensus_span(&q.annotations).unwrap();
            Fixed(vec![c]).rank(q, v)
        }
    }

    #[test]
    fn ambiguity_example() {
        let a = [s(3, 3), s(3, 3), s(3, 3), s(3, 4)];
        let m = score_ranking(&[s(3, 3)], &a).unwrap();
        assert_eq!((m.r1, m.miou), (1.0, 1.0));
        let m = score_ranking(&[s(3, 4)], &a).unwrap();
        assert!((m.r1 - 1.0 / 3.0).abs() < 1e-12);
        assert!((m.miou - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn identical_annotations_score_one() {
        let a = [s(1, 2); 4];
        let m = score_ranking(&[s(1, 2)], &a).unwrap();
        assert_eq!(m, Metrics { r1: 1.0, r5: 1.0, miou: 1.0 });
    }

    #[test]
    fn arity_enforced() {
        assert!(matches!(
            score_prediction(&[s(0, 0)], &[s(0, 0); 3], Metric::MeanIou),
            Err(EvalError::Arity { .. })
        ));
    }

    #[test]
    fn oracle_matches_upper_bound_r1() {
        let qs = vec![
            query("a", 6, vec![s(3, 3), s(3, 3), s(3, 3), s(3, 4)]),
            query("b", 6, vec![s(0, 1), s(0, 0), s(2, 5), s(1, 1)]),
            query("c", 5, vec![s(4, 4), s(4, 4), s(0, 4), s(0, 4)]),
        ];
        let o = evaluate(&Oracle, &qs, &VideoSet::new(), Execution::Sequential).unwrap();
        let u = baseline_upper_bound(&qs, Execution::Sequential).unwrap();
        assert_eq!(o.metrics.r1, u.metrics.r1);
        assert_eq!(u.metrics.r5, 1.0);
    }

    #[test]
    fn reversed_oracle_zero_recall() {
        let qs = vec![query("a", 6, vec![s(0, 0), s(0, 0), s(0, 1), s(0, 0)])];
        struct Reversed;
        impl RankingSource for Reversed {
            fn rank(&self, q: &Query, _: &VideoSet) -> Result<Vec<Span>, EvalError> {
                let mut c = enumerate_candidates(q.num_segments)?;
                c.reverse();
                Ok(c)
            }
        }
        let r = evaluate(&Reversed, &qs, &VideoSet::new(), Execution::Sequential).unwrap();
        assert_eq!(r.metrics.r5, 0.0);
    }

    #[test]
    fn ranking_must_be_permutation() {
        let qs = vec![query("a", 3, vec![s(0, 0); 4])];
        let bad = Fixed(vec![s(0, 0), s(0, 0)]);
        assert!(evaluate(&bad, &qs, &VideoSet::new(), Execution::Sequential).is_err());
    }

    #[test]
    fn model_ranker_reports_missing_videos() {
        let p = crate::model::ModelParams::init(
            crate::model::ModelConfig {
                joint_dim: 2,
                visual_hidden: 2,
                lstm_hidden: 2,
                ..crate::model::ModelConfig::new(2, 2, 2)
            },
            crate::language::Vocabulary::from_parts(vec![], crate::numerics::Tensor2::zeros(1, 2)).unwrap(),
            0,
        )
        .unwrap();
        let qs = vec![query("a", 3, vec![s(0, 0); 4]), query("b", 3, vec![s(0, 0); 4])];
        match evaluate(&ModelRanker::new(&p), &qs, &VideoSet::new(), Execution::Sequential) {
            Err(EvalError::MissingVideos(ids)) => assert_eq!(ids, vec!["va", "vb"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn upper_bound_ambiguity_picks_majority() {
        let q = query("a", 6, vec![s(3, 3), s(3, 3), s(3, 3), s(3, 4)]);
        let (m, top) = upper_bound_scores(&q).unwrap();
        assert_eq!(top, s(3, 3));
        assert_eq!(m.r1, 1.0);
    }

    #[test]
    fn prior_ranking() {
        let train = vec![
            query("a", 6, vec![s(0, 0), s(0, 0), s(1, 1), s(0, 0)]),
            query("b", 6, vec![s(1, 1), s(2, 2), s(0, 0), s(5, 5)]),
        ];
        let prior = MomentPrior::fit(&train);
        let r = prior.ranking(6).unwrap();
        assert_eq!(&r[..4], &[s(0, 0), s(1, 1), s(2, 2), s(5, 5)]);
        // unseen spans follow in (start, end) order
        assert_eq!(r[4], s(0, 1));
        assert_eq!(r.len(), 21);
        assert_eq!(prior.ranking(5).unwrap()[3], s(0, 1));
    }

    #[test]
    fn chance_single_video_analytic() {
        let qs = vec![query("a", 6, vec![s(2, 4); 4])];
        let r = baseline_chance(&qs, 3, DEFAULT_CHANCE_TRIALS, Execution::Sequential).unwrap();
        assert!((r.metrics.r1 - 1.0 / 21.0).abs() < 0.005);
        assert!((r.metrics.r5 - 5.0 / 21.0).abs() < 0.01);
        let again = baseline_chance(&qs, 3, DEFAULT_CHANCE_TRIALS, Execution::Parallel).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn report_json_shape() {
        let qs = vec![query("a", 2, vec![s(0, 0); 4])];
        let r = baseline_upper_bound(&qs, Execution::Sequential).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["metrics"]["r1"], 1.0);
        assert_eq!(v["per_query"][0]["top1"], serde_json::json!([0, 0]));
        assert_eq!(v["config"]["baseline"], "upper_bound");
        assert!(r.table_row("Upper Bound").contains("100.00"));
    }

    fn brute(ranked: &[Span], a: &[Span], metric: Metric) -> f64 {
        let mut best = f64::NEG_INFINITY;
        for skip in 0..4 {
            let mut sum = 0.0;
            for (i, &x) in a.iter().enumerate() {
                if i == skip {
                    continue;
                }
                sum += match metric {
                    Metric::RecallAt(k) => {
                        if ranked[..k.min(ranked.len())].contains(&x) {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    Metric::MeanIou => temporal_iou(ranked[0], x),
                };
            }
            best = best.max(sum / 3.0);
        }
        best
    }

    fn span_in(n: usize) -> impl Strategy<Value = Span> {
        (0..n).prop_flat_map(move |a| (a..n).prop_map(move |b| Span::new(a, b)))
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            a in proptest::collection::vec(span_in(6), 4),
            perm in Just(enumerate_candidates(6).unwrap()).prop_shuffle(),
        ) {
            for metric in [Metric::RecallAt(1), Metric::RecallAt(5), Metric::MeanIou] {
                prop_assert_eq!(score_prediction(&perm, &a, metric).unwrap(), brute(&perm, &a, metric));
            }
        }

        #[test]
        fn permutation_invariant_and_bounded(
            a in proptest::collection::vec(span_in(6), 4),
            perm in Just(enumerate_candidates(6).unwrap()).prop_shuffle(),
            rot in 0usize..4,
        ) {
            let mut b = a.clone();
            b.rotate_left(rot);
            let m = score_ranking(&perm, &a).unwrap();
            let m2 = score_ranking(&perm, &b).unwrap();
            prop_assert_eq!((m.r1, m.r5), (m2.r1, m2.r5));
            prop_assert!((m.miou - m2.miou).abs() < 1e-12);
            prop_assert!(m.r1 <= m.r5);
            let q = query("x", 6, a);
            let (u, _) = upper_bound_scores(&q).unwrap();
            prop_assert!(m.r1 <= u.r1 && m.r5 <= u.r5 && m.miou <= u.miou + 1e-12);
        }
    }
}
