//! The moment context network: two visual branches, a sentence encoder, the
//! fused squared distance, ranking losses and training.

mod branch;
mod checkpoint;
mod gradsuite;
mod loss;
mod train;

pub use branch::{BranchCache, VisualBranch};
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradsuite::{
    run_grad_check, run_grad_suite, GradSuiteConfig, LayerCheck, GRAD_CHECKS, KINK_MARGIN,
};
pub use loss::{
    combined_loss, combined_loss_and_grads, distance, hinge, inter_loss, intra_loss, localize,
    localize_windows, BatchItem, BatchLoss, Negatives, QueryEmbedding, TrainingExample, WindowScore,
};
pub use train::{
    train, EpochLog, InterSampler, TrainConfig, TrainOutcome, TrainingData,
};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, KeyValues};
use crate::features::{context_width, FeatureError, FeatureFlags};
use crate::language::{LanguageError, SentenceEncoder, Vocabulary};
use crate::numerics::{NumericsError, Params, Tensor2, INIT_SCALE};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Language(#[from] LanguageError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("video `{0}` has no features")]
    MissingVideo(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which visual modalities contribute to the distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Modalities {
    Rgb,
    Flow,
    #[default]
    Both,
}

impl Modalities {
    /// Weights of the rgb and flow squared distances.
    pub fn weights(self, eta: f64) -> (f64, f64) {
        match self {
            Modalities::Rgb => (1.0, 0.0),
            Modalities::Flow => (0.0, 1.0),
            Modalities::Both => (1.0, eta),
        }
    }
}

impl fmt::Display for Modalities {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modalities::Rgb => "rgb",
            Modalities::Flow => "flow",
            Modalities::Both => "rgb+flow",
        })
    }
}

impl FromStr for Modalities {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rgb" => Ok(Modalities::Rgb),
            "flow" => Ok(Modalities::Flow),
            "rgb+flow" | "both" | "flow+rgb" => Ok(Modalities::Both),
            other => Err(format!("unknown modalities `{other}`")),
        }
    }
}

/// Hidden-layer nonlinearity of the visual branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        })
    }
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(format!("unknown activation `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub rgb_dim: usize,
    pub flow_dim: usize,
    pub word_dim: usize,
    pub joint_dim: usize,
    pub visual_hidden: usize,
    pub lstm_hidden: usize,
    /// Late-fusion weight of the flow distance.
    pub eta: f64,
    pub margin: f64,
    /// Weight of the intra-video loss; the inter-video loss gets `1 - lambda`.
    pub lambda: f64,
    pub features: FeatureFlags,
    pub modalities: Modalities,
    /// Replace the sentence encoder by one learned vector shared by all queries.
    pub language_free: bool,
    pub fine_tune_words: bool,
    pub activation: Activation,
}

impl ModelConfig {
    pub fn new(rgb_dim: usize, flow_dim: usize, word_dim: usize) -> Self {
        Self {
            rgb_dim,
            flow_dim,
            word_dim,
            joint_dim: 100,
            visual_hidden: 500,
            lstm_hidden: 1000,
            eta: 2.33,
            margin: 0.1,
            lambda: 0.5,
            features: FeatureFlags::default(),
            modalities: Modalities::Both,
            language_free: false,
            fine_tune_words: false,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Configuration(m));
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be >= 0, got {}", self.eta));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return bad(format!("margin must be > 0, got {}", self.margin));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        for (name, v) in [
            ("rgb_dim", self.rgb_dim),
            ("flow_dim", self.flow_dim),
            ("word_dim", self.word_dim),
            ("joint_dim", self.joint_dim),
            ("visual_hidden", self.visual_hidden),
            ("lstm_hidden", self.lstm_hidden),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("rgb_dim", self.rgb_dim);
        kv.set("flow_dim", self.flow_dim);
        kv.set("word_dim", self.word_dim);
        kv.set("joint_dim", self.joint_dim);
        kv.set("visual_hidden", self.visual_hidden);
        kv.set("lstm_hidden", self.lstm_hidden);
        kv.set("eta", format!("{:?}", self.eta));
        kv.set("margin", format!("{:?}", self.margin));
        kv.set("lambda", format!("{:?}", self.lambda));
        kv.set("use_global", self.features.use_global);
        kv.set("use_tef", self.features.use_tef);
        kv.set("modalities", self.modalities);
        kv.set("language_free", self.language_free);
        kv.set("fine_tune_words", self.fine_tune_words);
        kv.set("activation", self.activation);
        kv
    }

    /// Reads every key that is present; absent keys keep their current value.
    pub fn apply_kv(&mut self, kv: &KeyValues) -> Result<(), ConfigError> {
        macro_rules! take {
            ($field:expr, $key:literal) => {
                if let Some(v) = kv.get($key)? {
                    $field = v;
                }
            };
        }
        take!(self.rgb_dim, "rgb_dim");
        take!(self.flow_dim, "flow_dim");
        take!(self.word_dim, "word_dim");
        take!(self.joint_dim, "joint_dim");
        take!(self.visual_hidden, "visual_hidden");
        take!(self.lstm_hidden, "lstm_hidden");
        take!(self.eta, "eta");
        take!(self.margin, "margin");
        take!(self.lambda, "lambda");
        take!(self.features.use_global, "use_global");
        take!(self.features.use_tef, "use_tef");
        take!(self.modalities, "modalities");
        take!(self.language_free, "language_free");
        take!(self.fine_tune_words, "fine_tune_words");
        take!(self.activation, "activation");
        Ok(())
    }
}

/// All trainable weights θ plus the vocabulary they were built against.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub rgb: VisualBranch,
    pub flow: VisualBranch,
    pub encoder: SentenceEncoder,
    pub vocabulary: Vocabulary,
    /// The shared query embedding of the language-free variant; empty otherwise.
    pub query_constant: Vec<f64>,
}

/// Gradient buffers mirroring the trainable part of [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub rgb: VisualBranch,
    pub flow: VisualBranch,
    pub encoder: SentenceEncoder,
    pub words: Option<Tensor2>,
    pub query_constant: Vec<f64>,
    language_free: bool,
}

impl ModelParams {
    /// Uniform `±0.08` weights, zero biases, forget-gate bias `+1`.
    pub fn init(config: ModelConfig, vocabulary: Vocabulary, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if vocabulary.dim() != config.word_dim {
            return Err(ModelError::Configuration(format!(
                "word vectors have {} dimensions but the model expects {}",
                vocabulary.dim(),
                config.word_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rgb = VisualBranch::init(
            context_width(config.rgb_dim),
            config.visual_hidden,
            config.joint_dim,
            config.activation,
            &mut rng,
        );
        let flow = VisualBranch::init(
            context_width(config.flow_dim),
            config.visual_hidden,
            config.joint_dim,
            config.activation,
            &mut rng,
        );
        let (encoder, query_constant) = if config.language_free {
            (
                SentenceEncoder::zeros(0, 0, 0),
                Tensor2::uniform(1, config.joint_dim, INIT_SCALE, &mut rng).into_data(),
            )
        } else {
            (
                SentenceEncoder::init(config.word_dim, config.lstm_hidden, config.joint_dim, &mut rng),
                Vec::new(),
            )
        };
        Ok(Self {
            config,
            rgb,
            flow,
            encoder,
            vocabulary,
            query_constant,
        })
    }

    pub fn zero_grads(&self) -> ModelGrads {
        let zero_branch = |b: &VisualBranch| VisualBranch::zeros_like(b);
        ModelGrads {
            rgb: zero_branch(&self.rgb),
            flow: zero_branch(&self.flow),
            encoder: SentenceEncoder::zeros(
                self.encoder.lstm.input(),
                self.encoder.lstm.hidden(),
                self.encoder.projection.outputs(),
            ),
            words: (self.config.fine_tune_words && !self.config.language_free).then(|| {
                let t = self.vocabulary.table();
                Tensor2::zeros(t.rows(), t.cols())
            }),
            query_constant: vec![0.0; self.query_constant.len()],
            language_free: self.config.language_free,
        }
    }

    fn trains_words(&self) -> bool {
        self.config.fine_tune_words && !self.config.language_free
    }
}

type Named<'a> = Vec<(String, &'a [f64])>;
type NamedMut<'a> = Vec<(String, &'a mut [f64])>;

fn collect<'a>(
    rgb: &'a VisualBranch,
    flow: &'a VisualBranch,
    encoder: &'a SentenceEncoder,
    words: Option<&'a Tensor2>,
    query_constant: &'a [f64],
    language_free: bool,
) -> Named<'a> {
    let mut out = Vec::new();
    rgb.push_tensors("rgb", &mut out);
    flow.push_tensors("flow", &mut out);
    if language_free {
        out.push(("language.query_constant".to_string(), query_constant));
    } else {
        encoder.lstm.push_tensors("language.lstm", &mut out);
        encoder.projection.push_tensors("language.projection", &mut out);
        if let Some(w) = words {
            out.push(("language.word_table".to_string(), w.data()));
        }
    }
    out
}

fn collect_mut<'a>(
    rgb: &'a mut VisualBranch,
    flow: &'a mut VisualBranch,
    encoder: &'a mut SentenceEncoder,
    words: Option<&'a mut Tensor2>,
    query_constant: &'a mut [f64],
    language_free: bool,
) -> NamedMut<'a> {
    let mut out = Vec::new();
    rgb.push_tensors_mut("rgb", &mut out);
    flow.push_tensors_mut("flow", &mut out);
    if language_free {
        out.push(("language.query_constant".to_string(), query_constant));
    } else {
        encoder.lstm.push_tensors_mut("language.lstm", &mut out);
        encoder.projection.push_tensors_mut("language.projection", &mut out);
        if let Some(w) = words {
            out.push(("language.word_table".to_string(), w.data_mut()));
        }
    }
    out
}

impl Params for ModelParams {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let words = self.trains_words().then(|| self.vocabulary.table());
        collect(
            &self.rgb,
            &self.flow,
            &self.encoder,
            words,
            &self.query_constant,
            self.config.language_free,
        )
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let trains_words = self.trains_words();
        let words = trains_words.then(|| self.vocabulary.table_mut());
        collect_mut(
            &mut self.rgb,
            &mut self.flow,
            &mut self.encoder,
            words,
            &mut self.query_constant,
            self.config.language_free,
        )
    }
}

impl Params for ModelGrads {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        collect(
            &self.rgb,
            &self.flow,
            &self.encoder,
            self.words.as_ref(),
            &self.query_constant,
            self.language_free,
        )
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        collect_mut(
            &mut self.rgb,
            &mut self.flow,
            &mut self.encoder,
            self.words.as_mut(),
            &mut self.query_constant,
            self.language_free,
        )
    }
}


#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;

    #[test]
    fn config_round_trips_through_key_values() {
        let mut cfg = ModelConfig::new(16, 8, 32);
        cfg.eta = 0.1 + 0.2;
        cfg.modalities = Modalities::Flow;
        cfg.features.use_tef = false;
        cfg.language_free = true;
        let mut back = ModelConfig::new(1, 1, 1);
        back.apply_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn config_ranges() {
        let mut cfg = ModelConfig::new(4, 4, 4);
        cfg.lambda = 1.5;
        assert!(cfg.validate().is_err());
        cfg.lambda = 1.0;
        cfg.margin = 0.0;
        assert!(cfg.validate().is_err());
        cfg.margin = 0.1;
        cfg.eta = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn grads_mirror_params() {
        for (language_free, fine_tune) in [(false, false), (false, true), (true, false), (true, true)] {
            let mut cfg = small_config(3, 2);
            cfg.language_free = language_free;
            cfg.fine_tune_words = fine_tune;
            let p = ModelParams::init(cfg, vocabulary(4, 2, 0), 1).unwrap();
            let g = p.zero_grads();
            let pn: Vec<(String, usize)> = p.tensors().into_iter().map(|(n, t)| (n, t.len())).collect();
            let gn: Vec<(String, usize)> = g.tensors().into_iter().map(|(n, t)| (n, t.len())).collect();
            assert_eq!(pn, gn);
        }
    }

    #[test]
    fn init_rejects_word_dim_mismatch() {
        assert!(ModelParams::init(small_config(3, 5), vocabulary(4, 2, 0), 1).is_err());
    }
}
