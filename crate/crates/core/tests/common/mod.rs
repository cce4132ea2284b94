#![allow(dead_code)]

use mps::autodiff::{Graph, PairTarget, Var};
use mps::encoders::{Bound, ConditionSpec, Dimension, EncoderConfig, SyntheticImage, TokenSequence, Vocabulary};
use mps::error::Result;
use mps::gradcheck::Objective;
use mps::model::{MaskMode, ModelConfig, MpsModel, ScoreBatch, ScoreRequest, forward};
use mps::params::ParamSet;
use mps::tensor::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CORPUS: [&str; 3] = [
    "a red fox with light and color near the harbor",
    "a blue owl in the valley",
    "sharp hands and texture on a golden clock",
];

pub fn vocab() -> Vocabulary {
    Vocabulary::build(&CORPUS, 256).unwrap()
}

pub fn config(dim: usize, layers: usize, heads: usize, image_size: usize, mode: MaskMode) -> ModelConfig {
    let v = vocab();
    let mut cfg = ModelConfig::with_vocab(v.len());
    cfg.encoder = EncoderConfig {
        dim,
        layers,
        heads,
        ..EncoderConfig::default()
    };
    cfg.image_size = image_size;
    cfg.head.mask_mode = mode;
    cfg
}

pub fn random_image(rng: &mut ChaCha8Rng, size: usize) -> SyntheticImage {
    SyntheticImage::new(size, size, (0..size * size * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

/// Pairwise KL loss of a fixed batch, buildable in any precision.
pub struct ModelLoss {
    pub config: ModelConfig,
    pub prompts: Vec<TokenSequence>,
    pub images: Vec<SyntheticImage>,
    pub conditions: Vec<TokenSequence>,
    pub requests: Vec<ScoreRequest>,
    pub targets: Vec<PairTarget>,
    pub pairs: usize,
}

impl ModelLoss {
    /// `prompts.len()` pairs, each scored under every condition in `dims`.
    pub fn new(model: &MpsModel, prompts: &[&str], dims: &[Dimension], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let size = model.config.image_size;
        let prompt_tokens: Vec<TokenSequence> = prompts.iter().map(|p| model.tokenize(p).unwrap()).collect();
        let images: Vec<SyntheticImage> = (0..2 * prompts.len()).map(|_| random_image(&mut rng, size)).collect();
        let conditions: Vec<TokenSequence> = dims
            .iter()
            .map(|&d| model.condition_tokens(&ConditionSpec::for_dimension(d)).unwrap())
            .collect();
        let mut requests = Vec::new();
        let mut targets = Vec::new();
        for k in 0..prompts.len() {
            for j in 0..dims.len() {
                let p1 = rng.random_range(0.0..=1.0);
                targets.push(PairTarget {
                    first: requests.len(),
                    second: requests.len() + 1,
                    label: [p1, 1.0 - p1],
                });
                for image in [2 * k, 2 * k + 1] {
                    requests.push(ScoreRequest {
                        prompt: k,
                        image,
                        condition: j,
                    });
                }
            }
        }
        Self {
            config: model.config.clone(),
            prompts: prompt_tokens,
            images,
            conditions,
            requests,
            targets,
            pairs: prompts.len(),
        }
    }

    pub fn batch(&self) -> ScoreBatch<'_> {
        ScoreBatch {
            prompts: self.prompts.iter().collect(),
            images: self.images.iter().collect(),
            conditions: self.conditions.iter().collect(),
            requests: self.requests.clone(),
        }
    }
}

impl Objective for ModelLoss {
    fn loss<T: Scalar>(&self, g: &mut Graph<T>, params: &ParamSet<T>, vars: &[Var]) -> Result<Var> {
        let b = Bound::new(params, vars);
        let out = forward(g, &b, &self.config, &self.batch())?;
        g.pair_kl(out.scores, &self.targets, self.pairs as f64)
    }
}
