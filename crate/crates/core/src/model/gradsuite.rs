//! Finite-difference checks of every hand-written backward pass.
//!
//! Each check draws random shapes, weights and inputs, scalarises the layer
//! output with a random probe vector and compares the analytic gradient with
//! central differences. Draws that land within `KINK_MARGIN` of a ReLU or hinge
//! kink are redrawn: the finite difference straddles the kink there.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::loss::{combined_loss, combined_loss_and_grads, BatchItem, TrainingExample};
use super::{Activation, ModelConfig, ModelParams, VisualBranch};
use crate::exec::Execution;
use crate::features::{Modality, Video, VideoFeatures};
use crate::language::{SentenceEncoder, Vocabulary};
use crate::moments::Span;
use crate::numerics::{
    dot, grad_check, linear_backward, linear_forward, lstm_sequence_backward, lstm_sequence_forward,
    lstm_step, lstm_step_backward, relu, relu_backward, GradCheckConfig, GradCheckReport, LstmParams,
    Params, Tensor2,
};

pub const KINK_MARGIN: f64 = 1e-3;
const MAX_REDRAWS: usize = 1000;

/// Names of the checks, in the order they run.
pub const GRAD_CHECKS: [&str; 7] = [
    "linear",
    "relu",
    "lstm_step",
    "lstm_sequence",
    "visual_branch",
    "sentence_encoder",
    "combined_loss",
];

#[derive(Debug, Clone)]
pub struct GradSuiteConfig {
    pub instances: usize,
    pub seed: u64,
    pub check: GradCheckConfig,
    /// Scale the analytic gradient of this check by `1 + 1e-2`, a negative
    /// control proving the suite can fail.
    pub fault: Option<String>,
    pub execution: Execution,
}

impl Default for GradSuiteConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            seed: 0,
            check: GradCheckConfig::default(),
            fault: None,
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerCheck {
    pub name: String,
    pub instances: usize,
    /// Draws discarded for sitting near a kink.
    pub redraws: usize,
    pub report: GradCheckReport,
}

/// One scalarised instance: `(loss(x), x, analytic ∂loss/∂x, kink distance)`.
struct Instance {
    point: Vec<f64>,
    analytic: Vec<f64>,
    kink: f64,
    loss: Box<dyn Fn(&[f64]) -> f64>,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

fn split_at<'a>(x: &'a [f64], sizes: &[usize]) -> Vec<&'a [f64]> {
    let mut out = Vec::with_capacity(sizes.len());
    let mut at = 0;
    for &n in sizes {
        out.push(&x[at..at + n]);
        at += n;
    }
    out
}

fn linear_instance(rng: &mut ChaCha8Rng) -> Instance {
    let (i, o) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
    let w = uniform(rng, o * i, 1.0);
    let b = uniform(rng, o, 1.0);
    let x = uniform(rng, i, 1.0);
    let u = uniform(rng, o, 1.0);
    let wt = Tensor2::from_vec(o, i, w.clone()).expect("shape");
    let g = linear_backward(&wt, &b, &x, &u).expect("shape");
    let point = [w, b, x].concat();
    let analytic = [g.weight.into_data(), g.bias, g.input].concat();
    Instance {
        point,
        analytic,
        kink: f64::INFINITY,
        loss: Box::new(move |p| {
            let s = split_at(p, &[o * i, o, i]);
            let wt = Tensor2::from_vec(o, i, s[0].to_vec()).expect("shape");
            dot(&u, &linear_forward(&wt, s[1], s[2]).expect("shape"))
        }),
    }
}

fn relu_instance(rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.gen_range(1..=8);
    let x = uniform(rng, n, 1.0);
    let u = uniform(rng, n, 1.0);
    let kink = x.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    Instance {
        analytic: relu_backward(&x, &u),
        point: x,
        kink,
        loss: Box::new(move |p| dot(&u, &relu(p))),
    }
}

fn lstm_parts(p: &[f64], input: usize, hidden: usize) -> (LstmParams, &[f64]) {
    let s = split_at(p, &[4 * hidden * input, 4 * hidden * hidden, 4 * hidden]);
    let rest = &p[4 * hidden * (input + hidden + 1)..];
    let params = LstmParams {
        input_weight: Tensor2::from_vec(4 * hidden, input, s[0].to_vec()).expect("shape"),
        hidden_weight: Tensor2::from_vec(4 * hidden, hidden, s[1].to_vec()).expect("shape"),
        bias: s[2].to_vec(),
    };
    (params, rest)
}

fn lstm_step_instance(rng: &mut ChaCha8Rng) -> Instance {
    let (input, hidden) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
    let mut params = LstmParams::init(input, hidden, rng);
    params.input_weight = Tensor2::uniform(4 * hidden, input, 1.0, rng);
    params.hidden_weight = Tensor2::uniform(4 * hidden, hidden, 1.0, rng);
    let x = uniform(rng, input, 1.0);
    let h = uniform(rng, hidden, 1.0);
    let c = uniform(rng, hidden, 1.0);
    let (uh, uc) = (uniform(rng, hidden, 1.0), uniform(rng, hidden, 1.0));
    let cache = lstm_step(&params, &x, &h, &c).expect("shape");
    let mut grads = LstmParams::zeros(input, hidden);
    let (dx, dh, dc) = lstm_step_backward(&params, &cache, &uh, &uc, &mut grads).expect("shape");
    let point = [params.flatten(), x, h, c].concat();
    let analytic = [grads.flatten(), dx, dh, dc].concat();
    Instance {
        point,
        analytic,
        kink: f64::INFINITY,
        loss: Box::new(move |p| {
            let (params, rest) = lstm_parts(p, input, hidden);
            let s = split_at(rest, &[input, hidden, hidden]);
            let out = lstm_step(&params, s[0], s[1], s[2]).expect("shape");
            dot(&uh, &out.h) + dot(&uc, &out.c)
        }),
    }
}

fn lstm_sequence_instance(rng: &mut ChaCha8Rng) -> Instance {
    let (input, hidden, len) = (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=5));
    let mut params = LstmParams::init(input, hidden, rng);
    params.input_weight = Tensor2::uniform(4 * hidden, input, 0.5, rng);
    params.hidden_weight = Tensor2::uniform(4 * hidden, hidden, 0.5, rng);
    let xs: Vec<Vec<f64>> = (0..len).map(|_| uniform(rng, input, 1.0)).collect();
    let u = uniform(rng, hidden, 1.0);
    let caches = lstm_sequence_forward(&params, &xs).expect("shape");
    let mut grads = LstmParams::zeros(input, hidden);
    let dxs = lstm_sequence_backward(&params, &caches, &u, &mut grads).expect("shape");
    let point = [params.flatten(), xs.concat()].concat();
    let analytic = [grads.flatten(), dxs.concat()].concat();
    Instance {
        point,
        analytic,
        kink: f64::INFINITY,
        loss: Box::new(move |p| {
            let (params, rest) = lstm_parts(p, input, hidden);
            let xs: Vec<&[f64]> = rest.chunks(input).collect();
            let caches = lstm_sequence_forward(&params, &xs).expect("shape");
            dot(&u, &caches.last().expect("non-empty").h)
        }),
    }
}

fn branch_instance(rng: &mut ChaCha8Rng) -> Instance {
    let (i, h, o) = (rng.gen_range(1..=6), rng.gen_range(1..=6), rng.gen_range(1..=5));
    let activation = if rng.gen_bool(0.8) { Activation::Relu } else { Activation::Identity };
    let mut branch = VisualBranch::init(i, h, o, activation, rng);
    for (_, t) in branch.tensors_mut() {
        t.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    }
    let x = uniform(rng, i, 1.0);
    let u = uniform(rng, o, 1.0);
    let (_, cache) = branch.forward(&x).expect("shape");
    let kink = match activation {
        Activation::Relu => cache.pre_activation.iter().fold(f64::INFINITY, |m, v| m.min(v.abs())),
        Activation::Identity => f64::INFINITY,
    };
    let mut grads = VisualBranch::zeros_like(&branch);
    branch.backward(&cache, &u, &mut grads).expect("shape");
    let template = branch.clone();
    Instance {
        point: branch.flatten(),
        analytic: grads.flatten(),
        kink,
        loss: Box::new(move |p| {
            let mut b = template.clone();
            b.assign_flat(p).expect("shape");
            dot(&u, &b.embed(&x).expect("shape"))
        }),
    }
}

/// Encoder weights followed by the word table.
fn encoder_flat(enc: &SentenceEncoder, table: &Tensor2) -> Vec<f64> {
    let mut out = enc.lstm.flatten();
    out.extend(enc.projection.flatten());
    out.extend_from_slice(table.data());
    out
}

fn encoder_instance(rng: &mut ChaCha8Rng) -> Instance {
    let (words, dim, hidden, joint) = (
        rng.gen_range(2..=6),
        rng.gen_range(1..=4),
        rng.gen_range(1..=4),
        rng.gen_range(1..=4),
    );
    let mut enc = SentenceEncoder::init(dim, hidden, joint, rng);
    enc.lstm.input_weight = Tensor2::uniform(4 * hidden, dim, 0.5, rng);
    enc.lstm.hidden_weight = Tensor2::uniform(4 * hidden, hidden, 0.5, rng);
    enc.projection.weight = Tensor2::uniform(joint, hidden, 1.0, rng);
    let table = Tensor2::uniform(words, dim, 1.0, rng);
    let tokens: Vec<usize> = (0..rng.gen_range(1..=5)).map(|_| rng.gen_range(0..words)).collect();
    let u = uniform(rng, joint, 1.0);
    let (_, cache) = enc.forward(&table, &tokens).expect("shape");
    let mut grads = SentenceEncoder::zeros(dim, hidden, joint);
    let mut table_grads = Tensor2::zeros(words, dim);
    enc.backward(&cache, &u, &mut grads, Some(&mut table_grads)).expect("shape");
    let point = encoder_flat(&enc, &table);
    let analytic = encoder_flat(&grads, &table_grads);
    let template = enc;
    Instance {
        point,
        analytic,
        kink: f64::INFINITY,
        loss: Box::new(move |p| {
            let mut e = template.clone();
            let n_lstm = e.lstm.num_params();
            let n_proj = e.projection.num_params();
            e.lstm.assign_flat(&p[..n_lstm]).expect("shape");
            e.projection.assign_flat(&p[n_lstm..n_lstm + n_proj]).expect("shape");
            let table = Tensor2::from_vec(words, dim, p[n_lstm + n_proj..].to_vec()).expect("shape");
            dot(&u, &e.forward(&table, &tokens).expect("shape").0)
        }),
    }
}

fn random_video(rng: &mut ChaCha8Rng, id: &str, dim: usize) -> Video {
    let (segments, fps) = (rng.gen_range(1..=5), rng.gen_range(1..=3));
    let t = segments * fps;
    let mut make = |m| {
        let frames = Tensor2::uniform(t, dim, 1.0, rng);
        VideoFeatures::new(id, m, frames, segments, fps).expect("valid video")
    };
    let rgb = make(Modality::Rgb);
    let flow = make(Modality::Flow);
    Video::new(rgb, flow).expect("matching modalities")
}

/// A two- or three-video batch, one example per video, every other video
/// long enough to hold the positive span as an inter-video negative.
fn combined_instance(rng: &mut ChaCha8Rng) -> Instance {
    let dim = rng.gen_range(1..=3);
    let word_dim = rng.gen_range(1..=3);
    let mut cfg = ModelConfig {
        joint_dim: rng.gen_range(1..=4),
        visual_hidden: rng.gen_range(1..=5),
        lstm_hidden: rng.gen_range(1..=4),
        ..ModelConfig::new(dim, dim, word_dim)
    };
    cfg.lambda = rng.gen_range(0.0..=1.0);
    cfg.eta = rng.gen_range(0.5..3.0);
    cfg.margin = rng.gen_range(0.1..1.0);
    cfg.language_free = rng.gen_bool(0.25);
    cfg.fine_tune_words = rng.gen_bool(0.5);
    cfg.features.use_tef = rng.gen_bool(0.8);
    cfg.features.use_global = rng.gen_bool(0.8);
    let words = rng.gen_range(2..=6);
    let tokens = (0..words).map(|i| format!("w{i}")).collect();
    let vocab =
        Vocabulary::from_parts(tokens, Tensor2::uniform(words + 1, word_dim, 1.0, rng)).expect("vocabulary");
    let mut params = ModelParams::init(cfg, vocab, rng.gen()).expect("valid config");
    // Init scale leaves the embeddings nearly equal; widen it so hinges vary.
    for (_, t) in params.tensors_mut() {
        t.iter_mut().for_each(|v| *v *= 5.0);
    }
    let videos: Vec<Video> = (0..rng.gen_range(2..=3))
        .map(|i| random_video(rng, &format!("v{i}"), dim))
        .collect();
    let examples: Vec<TrainingExample> = videos
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let n = v.num_segments();
            let start = rng.gen_range(0..n);
            TrainingExample {
                annotation_id: format!("q{i}"),
                tokens: (0..rng.gen_range(1..=4)).map(|_| rng.gen_range(0..=words)).collect(),
                video_id: v.id().to_string(),
                positive: Span::new(start, rng.gen_range(start..n)),
            }
        })
        .collect();
    let layout: Vec<(usize, Vec<usize>)> = (0..videos.len())
        .map(|i| {
            let end = examples[i].positive.end;
            let negs = (0..videos.len())
                .filter(|&j| j != i && videos[j].num_segments() > end)
                .collect();
            (i, negs)
        })
        .collect();
    let items: Vec<BatchItem<'_>> = layout
        .iter()
        .map(|(i, negs)| BatchItem {
            example: &examples[*i],
            video: &videos[*i],
            negatives: negs.iter().map(|&j| &videos[j]).collect(),
        })
        .collect();
    let (loss, grads) =
        combined_loss_and_grads(&params, &items, Execution::Sequential).expect("valid batch");
    let point = params.flatten();
    let analytic = grads.flatten();
    let kink = loss.min_kink;
    drop(items);
    Instance {
        point,
        analytic,
        kink,
        loss: Box::new(move |p| {
            let mut probe = params.clone();
            probe.assign_flat(p).expect("shape");
            let items: Vec<BatchItem<'_>> = layout
                .iter()
                .map(|(i, negs)| BatchItem {
                    example: &examples[*i],
                    video: &videos[*i],
                    negatives: negs.iter().map(|&j| &videos[j]).collect(),
                })
                .collect();
            combined_loss(&probe, &items).expect("valid batch").total
        }),
    }
}

fn draw(name: &str, rng: &mut ChaCha8Rng) -> Instance {
    match name {
        "linear" => linear_instance(rng),
        "relu" => relu_instance(rng),
        "lstm_step" => lstm_step_instance(rng),
        "lstm_sequence" => lstm_sequence_instance(rng),
        "visual_branch" => branch_instance(rng),
        "sentence_encoder" => encoder_instance(rng),
        "combined_loss" => combined_instance(rng),
        other => panic!("unknown gradient check `{other}`"),
    }
}

/// Runs `instances` draws of one named check. Instance `i` uses its own RNG
/// stream, so results do not depend on the execution mode.
pub fn run_grad_check(name: &str, config: &GradSuiteConfig) -> LayerCheck {
    assert!(GRAD_CHECKS.contains(&name), "unknown gradient check `{name}`");
    let faulty = config.fault.as_deref() == Some(name);
    let per_instance = config.execution.map_range(config.instances, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(i as u64 + 1);
        let mut redraws = 0;
        let inst = loop {
            let inst = draw(name, &mut rng);
            if inst.kink >= KINK_MARGIN || redraws >= MAX_REDRAWS {
                break inst;
            }
            redraws += 1;
        };
        let mut analytic = inst.analytic;
        if faulty {
            analytic.iter_mut().for_each(|g| *g *= 1.0 + 1e-2);
        }
        let check = GradCheckConfig {
            seed: config.check.seed.wrapping_add(i as u64),
            ..config.check
        };
        (grad_check(&inst.loss, &inst.point, &analytic, &check), redraws)
    });
    let redraws = per_instance.iter().map(|(_, r)| r).sum();
    LayerCheck {
        name: name.to_string(),
        instances: config.instances,
        redraws,
        report: GradCheckReport::merge(per_instance.into_iter().map(|(r, _)| r)),
    }
}

pub fn run_grad_suite(config: &GradSuiteConfig) -> Vec<LayerCheck> {
    GRAD_CHECKS.iter().map(|name| run_grad_check(name, config)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(fault: Option<&str>) -> GradSuiteConfig {
        GradSuiteConfig {
            instances: 10,
            seed: 3,
            fault: fault.map(str::to_string),
            execution: Execution::Sequential,
            ..Default::default()
        }
    }

    #[test]
    fn every_check_passes() {
        for c in run_grad_suite(&quick(None)) {
            assert!(c.report.passed, "{}: {:?}", c.name, c.report);
            assert!(c.report.checked > 0, "{} checked nothing", c.name);
        }
    }

    #[test]
    fn injected_fault_is_caught() {
        for name in GRAD_CHECKS {
            let c = run_grad_check(name, &quick(Some(name)));
            assert!(!c.report.passed, "{name} missed the fault");
            assert!(c.report.max_relative_error > 1e-3);
        }
    }
}
