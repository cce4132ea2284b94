//! Model configuration, parameters, and the batched scoring forward pass.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, KeyBias, Segment, Var};
use crate::encoders::image::CHANNELS;
use crate::encoders::stack::{self, Bound, EncoderConfig};
use crate::encoders::vocab::{DEFAULT_MAX_LEN, TokenSequence, Vocabulary};
use crate::encoders::{self, ConditionSpec, SyntheticImage};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Tokens with relevance below `tau` are removed from attention.
    Hard,
    /// Relevance scaled by `soft_lambda` is added to the attention logits.
    Soft,
    /// Plain cross attention.
    Off,
}

impl std::str::FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(MaskMode::Hard),
            "soft" => Ok(MaskMode::Soft),
            "off" => Ok(MaskMode::Off),
            other => Err(Error::Config(format!("unknown mask mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub mask_mode: MaskMode,
    pub tau: f64,
    pub straight_through: bool,
    pub soft_lambda: f64,
    /// When false the image CLS row is scored directly, without fusion.
    pub cross_attention: bool,
    pub alpha_init: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            mask_mode: MaskMode::Hard,
            tau: 0.0,
            straight_through: true,
            soft_lambda: 1.0,
            cross_attention: true,
            alpha_init: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub vocab_size: usize,
    pub max_len: usize,
    pub image_size: usize,
    pub patch: usize,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn with_vocab(vocab_size: usize) -> Self {
        Self {
            encoder: EncoderConfig::default(),
            vocab_size,
            max_len: DEFAULT_MAX_LEN,
            image_size: 32,
            patch: 8,
            head: HeadConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.max_len < 2 || self.vocab_size < 4 {
            return Err(Error::Config("max_len must be ≥ 2 and vocab_size ≥ 4".into()));
        }
        if self.patch == 0 || self.image_size == 0 || self.image_size % self.patch != 0 {
            return Err(Error::Config(format!(
                "patch {} does not tile image size {}",
                self.patch, self.image_size
            )));
        }
        if self.head.tau.is_nan() || !self.head.soft_lambda.is_finite() || !self.head.alpha_init.is_finite() {
            return Err(Error::Config("head constants must be finite".into()));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * CHANNELS
    }

    /// Rows of an encoded image, CLS included.
    pub fn image_rows(&self) -> usize {
        self.n_patches() + 1
    }
}

/// Creates every parameter in a fixed order from `seed`.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let e = &cfg.encoder;
    encoders::init_text(&mut ps, e, cfg.vocab_size, cfg.max_len, &mut rng);
    encoders::init_image(&mut ps, e, cfg.patch_dim(), cfg.n_patches(), &mut rng);
    for w in ["head.w_q", "head.w_k", "head.w_v", "head.w_c"] {
        ps.push(w, stack::linear(&mut rng, e.dim, e.dim), true);
    }
    ps.push("head.b_c", Tensor::zeros(vec![1, 1]), false);
    ps.push("head.alpha", Tensor::filled(vec![1, 1], T::lit(cfg.head.alpha_init)), false);
    Ok(ps)
}

/// One score to compute: indices into the batch's prompts, images, conditions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScoreRequest {
    pub prompt: usize,
    pub image: usize,
    pub condition: usize,
}

#[derive(Clone, Debug, Default)]
pub struct ScoreBatch<'a> {
    pub prompts: Vec<&'a TokenSequence>,
    pub images: Vec<&'a SyntheticImage>,
    pub conditions: Vec<&'a TokenSequence>,
    pub requests: Vec<ScoreRequest>,
}

/// Tape handles produced by [`forward`].
pub struct ForwardOutput {
    /// `n_requests × 1`, in request order.
    pub scores: Var,
    /// Encoded prompts and conditions, row-stacked.
    pub text: Var,
    pub prompt_rows: Vec<Range<usize>>,
    pub condition_rows: Vec<Range<usize>>,
    /// Encoded images, `image_rows` each.
    pub image: Var,
    pub image_attention: Vec<Var>,
    /// Per condition, the `1 × Σn_p` mean relevance row over all prompt rows.
    pub relevance: Vec<Option<Var>>,
    /// Per condition, the cross-attention node and the request indices it
    /// serves (in query-row order).
    pub fusion: Vec<Option<(Var, Vec<usize>)>>,
}

/// Patch matrix of a batch of images, `batch·n_patches × patch_dim`.
pub fn patch_matrix<T: Scalar>(cfg: &ModelConfig, images: &[&SyntheticImage]) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(images.len() * cfg.n_patches() * cfg.patch_dim());
    for img in images {
        if img.height() != cfg.image_size || img.width() != cfg.image_size {
            return Err(Error::invalid(format!(
                "image is {}×{}, model expects {}×{}",
                img.height(),
                img.width(),
                cfg.image_size,
                cfg.image_size
            )));
        }
        data.extend(img.patchify(cfg.patch)?.into_iter().map(|x| T::lit(f64::from(x))));
    }
    Tensor::new(vec![images.len() * cfg.n_patches(), cfg.patch_dim()], data)
}

fn ranges(lengths: impl IntoIterator<Item = usize>, mut start: usize) -> Vec<Range<usize>> {
    lengths
        .into_iter()
        .map(|n| {
            let r = start..start + n;
            start += n;
            r
        })
        .collect()
}

/// Scores every request of `batch` on one tape.
///
/// Prompts and conditions share the text encoder. Only the CLS row of each
/// image queries the prompt, since the score reads nothing else from the
/// fused rows.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound,
    cfg: &ModelConfig,
    batch: &ScoreBatch<'_>,
) -> Result<ForwardOutput> {
    let (np, ni, nc) = (batch.prompts.len(), batch.images.len(), batch.conditions.len());
    if batch.requests.is_empty() || np == 0 || ni == 0 {
        return Err(Error::invalid("empty score batch"));
    }
    for r in &batch.requests {
        if r.prompt >= np || r.image >= ni || r.condition >= nc.max(1) {
            return Err(Error::invalid(format!("request {r:?} out of range")));
        }
    }
    let needs_condition = cfg.head.cross_attention && cfg.head.mask_mode != MaskMode::Off;
    if needs_condition && nc == 0 {
        return Err(Error::invalid("masked scoring needs at least one condition"));
    }
    let seqs: Vec<&TokenSequence> = batch.prompts.iter().chain(&batch.conditions).copied().collect();
    let text = encoders::text_forward(g, b, &cfg.encoder, &seqs)?;
    let prompt_rows = ranges(batch.prompts.iter().map(|s| s.len()), 0);
    let total_prompt = prompt_rows.last().map_or(0, |r| r.end);
    let condition_rows = ranges(batch.conditions.iter().map(|s| s.len()), total_prompt);

    let patches = patch_matrix::<T>(cfg, &batch.images)?;
    let image = encoders::image_forward(g, b, &cfg.encoder, patches, cfg.n_patches())?;
    let rows = cfg.image_rows();

    let eos: Vec<usize> = batch.requests.iter().map(|r| prompt_rows[r.prompt].end - 1).collect();
    let f_t = g.gather_rows(text, &eos)?;

    let mut relevance = vec![None; nc.max(1)];
    let mut fusion = vec![None; nc.max(1)];
    let f_vt = if cfg.head.cross_attention {
        let x_p = g.gather_rows(text, &(0..total_prompt).collect::<Vec<_>>())?;
        let k = g.matmul(x_p, b.get("head.w_k")?)?;
        let v = g.matmul(x_p, b.get("head.w_v")?)?;
        let cls = g.gather_rows(image.out, &(0..ni).map(|i| i * rows).collect::<Vec<_>>())?;
        let q_all = g.matmul(cls, b.get("head.w_q")?)?;
        let mut parts = Vec::new();
        let mut order = Vec::with_capacity(batch.requests.len());
        for c in 0..nc.max(1) {
            let served: Vec<usize> = (0..batch.requests.len())
                .filter(|&i| batch.requests[i].condition == c)
                .collect();
            if served.is_empty() {
                continue;
            }
            let bias = if needs_condition {
                let x_c = g.gather_rows(text, &condition_rows[c].clone().collect::<Vec<_>>())?;
                let m = condition_relevance(g, b, x_c, x_p)?;
                relevance[c] = Some(m);
                key_bias(&cfg.head, m)
            } else {
                KeyBias::None
            };
            let q = g.gather_rows(q_all, &served.iter().map(|&i| batch.requests[i].image).collect::<Vec<_>>())?;
            let segments: Vec<Segment> = served
                .iter()
                .enumerate()
                .map(|(row, &i)| Segment {
                    queries: row..row + 1,
                    keys: prompt_rows[batch.requests[i].prompt].clone(),
                })
                .collect();
            let fused = g.attention(q, k, v, cfg.encoder.heads, &segments, bias)?;
            fusion[c] = Some((fused, served.clone()));
            parts.push(fused);
            order.extend(served);
        }
        let stacked = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
        let mut inverse = vec![0; order.len()];
        for (pos, &req) in order.iter().enumerate() {
            inverse[req] = pos;
        }
        g.gather_rows(stacked, &inverse)?
    } else {
        let cls: Vec<usize> = batch.requests.iter().map(|r| r.image * rows).collect();
        g.gather_rows(image.out, &cls)?
    };
    let dots = g.row_dot(f_vt, f_t)?;
    let scores = g.scale_by(dots, b.get("head.alpha")?)?;
    Ok(ForwardOutput {
        scores,
        text,
        prompt_rows,
        condition_rows,
        image: image.out,
        image_attention: image.attention,
        relevance,
        fusion,
    })
}

/// Mean over condition rows of `X_c W_c X_pᵀ + b_c`, a `1 × n_p` row.
fn condition_relevance<T: Scalar>(g: &mut Graph<T>, b: &Bound, x_c: Var, x_p: Var) -> Result<Var> {
    let a = g.matmul(x_c, b.get("head.w_c")?)?;
    let r = g.matmul_t(a, x_p)?;
    let r = g.shift_by(r, b.get("head.b_c")?)?;
    g.mean_rows(r)
}

fn key_bias<T: Scalar>(head: &HeadConfig, scores: Var) -> KeyBias<T> {
    match head.mask_mode {
        MaskMode::Hard => KeyBias::Hard {
            scores,
            tau: T::lit(head.tau),
            straight_through: head.straight_through,
        },
        MaskMode::Soft => KeyBias::Soft {
            scores,
            lambda: T::lit(head.soft_lambda),
        },
        MaskMode::Off => KeyBias::None,
    }
}

/// A trained or freshly initialized scorer with its vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct MpsModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamSet<f32>,
}

impl MpsModel {
    pub fn new(mut config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.vocab_size = vocab.len();
        let params = init_params(&config, seed)?;
        Ok(Self { config, vocab, params })
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        self.vocab.tokenize(text, self.config.max_len)
    }

    pub fn condition_tokens(&self, spec: &ConditionSpec) -> Result<TokenSequence> {
        self.tokenize(&spec.text())
    }

    fn bind(&self, g: &mut Graph<f32>) -> Result<Bound> {
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| g.constant(p.tensor.clone()))
            .collect::<Result<_>>()?;
        Ok(Bound::new(&self.params, &vars))
    }

    /// `X_t`: one row per token.
    pub fn encode_text(&self, tokens: &TokenSequence) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g)?;
        let x = encoders::text_forward(&mut g, &b, &self.config.encoder, &[tokens])?;
        Ok(g.value(x).clone())
    }

    /// `X_v`: CLS row followed by one row per patch.
    pub fn encode_image(&self, image: &SyntheticImage) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g)?;
        let patches = patch_matrix(&self.config, &[image])?;
        let x = encoders::image_forward(&mut g, &b, &self.config.encoder, patches, self.config.n_patches())?;
        Ok(g.value(x.out).clone())
    }

    /// `X_c`: the condition's words encoded by the text encoder.
    pub fn encode_condition(&self, spec: &ConditionSpec) -> Result<Tensor<f32>> {
        self.encode_text(&self.condition_tokens(spec)?)
    }

    /// Runs [`forward`] with frozen parameters and returns the graph and its
    /// outputs for inspection.
    pub fn run(&self, batch: &ScoreBatch<'_>) -> Result<(Graph<f32>, ForwardOutput)> {
        let mut g = Graph::new();
        let b = self.bind(&mut g)?;
        let out = forward(&mut g, &b, &self.config, batch)?;
        Ok((g, out))
    }

    /// Scores every request of `batch`.
    pub fn score_batch(&self, batch: &ScoreBatch<'_>) -> Result<Vec<f32>> {
        let (g, out) = self.run(batch)?;
        Ok(g.value(out.scores).data().to_vec())
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<f32>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Graph(format!("missing parameter {name}")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor<f32>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Graph(format!("missing parameter {name}")))
    }
}
