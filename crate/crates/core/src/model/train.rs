use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::eval::{evaluate, ModelRanker};
use crate::exec::Execution;
use crate::features::{Video, VideoSet};
use crate::language::Query;
use crate::numerics::{sgd_step, NumericsError, Params};

use super::loss::{combined_loss_and_grads, BatchItem};
use super::{ModelError, ModelParams, TrainingExample};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    /// Inter-video negatives drawn per example.
    pub inter_per_example: usize,
    /// Draws tried per negative before giving up on it.
    pub inter_attempts: usize,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 120,
            learning_rate: 0.05,
            seed: 0,
            patience: Some(5),
            inter_per_example: 1,
            inter_attempts: 10,
            execution: Execution::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.batch_size == 0 {
            return Err(ModelError::Configuration("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(NumericsError::LearningRate(self.learning_rate).into());
        }
        Ok(())
    }
}

pub struct TrainingData<'a> {
    pub examples: Vec<TrainingExample>,
    pub videos: &'a VideoSet,
    /// Queries scored by R@1 after every epoch to pick the kept weights.
    pub validation: Vec<Query>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean combined loss per example.
    pub train_loss: f64,
    pub intra: f64,
    pub inter: f64,
    pub val_r1: Option<f64>,
    /// Inter-video negatives actually used.
    pub inter_samples: usize,
    pub inter_skipped: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
    /// Epoch whose weights were kept; 0 means the initial weights.
    pub best_epoch: usize,
    pub best_val_r1: Option<f64>,
}

/// Draws inter-video negatives from the other examples of a minibatch.
#[derive(Debug, Clone, Default)]
pub struct InterSampler {
    pub drawn: usize,
    pub skipped: usize,
}

impl InterSampler {
    /// Negatives for `batch[i]`: videos of other batch members that differ
    /// from its own and are long enough to contain its span.
    pub fn sample<'a, R: Rng>(
        &mut self,
        rng: &mut R,
        batch: &[(&'a TrainingExample, &'a Video)],
        i: usize,
        count: usize,
        attempts: usize,
    ) -> Vec<&'a Video> {
        let (ex, own) = batch[i];
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let found = (0..attempts).find_map(|_| {
                let (_, v) = batch[rng.gen_range(0..batch.len())];
                (v.id() != own.id() && v.num_segments() > ex.positive.end).then_some(v)
            });
            match found {
                Some(v) => {
                    self.drawn += 1;
                    out.push(v);
                }
                None => self.skipped += 1,
            }
        }
        out
    }
}

fn check_data(params: &ModelParams, data: &TrainingData<'_>) -> Result<(), ModelError> {
    let vocab = params.vocabulary.len();
    for ex in &data.examples {
        let video = data
            .videos
            .get(&ex.video_id)
            .ok_or_else(|| ModelError::MissingVideo(ex.video_id.clone()))?;
        ex.positive
            .validate(video.num_segments())
            .map_err(crate::features::FeatureError::from)?;
        if let Some(&t) = ex.tokens.iter().find(|&&t| t >= vocab) {
            return Err(crate::language::LanguageError::Vocabulary { index: t, size: vocab }.into());
        }
        if ex.tokens.is_empty() {
            return Err(crate::language::LanguageError::NoTokens.into());
        }
    }
    for q in &data.validation {
        if !data.videos.contains_key(&q.video_id) {
            return Err(ModelError::MissingVideo(q.video_id.clone()));
        }
    }
    if params.config.lambda < 1.0 {
        let distinct: BTreeSet<&str> = data.examples.iter().map(|e| e.video_id.as_str()).collect();
        if distinct.len() < 2 {
            return Err(ModelError::Configuration(
                "the inter-video loss needs examples from at least two videos".into(),
            ));
        }
    }
    Ok(())
}

fn validation_r1(
    params: &ModelParams,
    queries: &[Query],
    videos: &VideoSet,
    exec: Execution,
) -> Result<Option<f64>, ModelError> {
    if queries.is_empty() {
        return Ok(None);
    }
    let report = evaluate(&ModelRanker::new(params), queries, videos, exec)
        .map_err(|e| ModelError::Configuration(format!("validation failed: {e}")))?;
    Ok(Some(report.metrics.r1))
}

/// Minibatch SGD on the combined ranking loss. The update uses the batch-mean
/// gradient. Keeps the weights with the best validation R@1 (earliest on
/// ties), or the final weights when there is no validation set.
pub fn train(
    initial: ModelParams,
    data: &TrainingData<'_>,
    config: &TrainConfig,
) -> Result<TrainOutcome, ModelError> {
    config.validate()?;
    initial.config.validate()?;
    check_data(&initial, data)?;
    let exec = config.execution;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = initial;
    let mut best_val = validation_r1(&params, &data.validation, data.videos, exec)?;
    let mut best = params.clone();
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..data.examples.len()).collect();
    let use_inter = params.config.lambda < 1.0;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sampler = InterSampler::default();
        let (mut total, mut intra, mut inter) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let members: Vec<(&TrainingExample, &Video)> = chunk
                .iter()
                .map(|&i| {
                    let ex = &data.examples[i];
                    (ex, &data.videos[&ex.video_id])
                })
                .collect();
            let items: Vec<BatchItem<'_>> = (0..members.len())
                .map(|i| BatchItem {
                    example: members[i].0,
                    video: members[i].1,
                    negatives: if use_inter {
                        sampler.sample(
                            &mut rng,
                            &members,
                            i,
                            config.inter_per_example,
                            config.inter_attempts,
                        )
                    } else {
                        Vec::new()
                    },
                })
                .collect();
            let (loss, mut grads) = combined_loss_and_grads(&params, &items, exec)?;
            if !loss.total.is_finite() {
                return Err(ModelError::Divergence(format!(
                    "non-finite loss {} in epoch {epoch}",
                    loss.total
                )));
            }
            total += loss.total;
            intra += loss.intra;
            inter += loss.inter;
            grads.scale(1.0 / items.len() as f64);
            sgd_step(&mut params, &grads, config.learning_rate).map_err(|e| match e {
                NumericsError::Divergence { .. } => ModelError::Divergence(format!("epoch {epoch}: {e}")),
                other => other.into(),
            })?;
        }
        let n = data.examples.len().max(1) as f64;
        let val_r1 = validation_r1(&params, &data.validation, data.videos, exec)?;
        let entry = EpochLog {
            epoch,
            train_loss: total / n,
            intra: intra / n,
            inter: inter / n,
            val_r1,
            inter_samples: sampler.drawn,
            inter_skipped: sampler.skipped,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} (intra {:.5}, inter {:.5}) val R@1 {}",
            entry.train_loss,
            entry.intra,
            entry.inter,
            val_r1.map_or("-".to_string(), |v| format!("{v:.4}"))
        );
        log.push(entry);
        match (val_r1, best_val) {
            (Some(v), Some(b)) if v > b => {
                best_val = Some(v);
                best = params.clone();
                best_epoch = epoch;
                stale = 0;
            }
            (Some(_), _) => {
                stale += 1;
                if config.patience.is_some_and(|p| stale >= p) {
                    log::info!("no validation improvement for {stale} epochs; stopping");
                    break;
                }
            }
            (None, _) => {
                best = params.clone();
                best_epoch = epoch;
            }
        }
    }

    Ok(TrainOutcome {
        params: best,
        log,
        best_epoch,
        best_val_r1: best_val,
    })
}
