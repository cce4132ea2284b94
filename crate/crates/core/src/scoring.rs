//! Scoring preference pairs with a model or with the planted teacher.

use std::collections::HashMap;

use crate::dataset::{Dataset, DatasetIndex, PreferencePair};
use crate::encoders::{ConditionSpec, Dimension, TokenSequence};
use crate::error::{Error, Result};
use crate::model::{MpsModel, ScoreBatch, ScoreRequest};

/// Pairs scored per forward pass outside training.
pub const EVAL_CHUNK: usize = 32;

/// A pair resolved to prompt and image positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairIx {
    pub prompt: usize,
    pub y1: usize,
    pub y2: usize,
}

/// A dataset tokenized for one model.
pub struct Prepared<'a> {
    pub dataset: &'a Dataset,
    pub index: DatasetIndex,
    pub prompt_tokens: Vec<TokenSequence>,
    /// In [`Dimension::ALL`] order.
    pub condition_tokens: Vec<TokenSequence>,
}

impl<'a> Prepared<'a> {
    pub fn new(model: &MpsModel, dataset: &'a Dataset) -> Result<Self> {
        let prompt_tokens = dataset
            .prompts
            .iter()
            .map(|p| model.tokenize(&p.text))
            .collect::<Result<_>>()?;
        let condition_tokens = Dimension::ALL
            .iter()
            .map(|&d| model.condition_tokens(&ConditionSpec::for_dimension(d)))
            .collect::<Result<_>>()?;
        Ok(Self {
            dataset,
            index: dataset.index(),
            prompt_tokens,
            condition_tokens,
        })
    }

    pub fn resolve(&self, pair: &PreferencePair) -> Result<PairIx> {
        let find = |map: &HashMap<String, usize>, id: &str| {
            map.get(id)
                .copied()
                .ok_or_else(|| Error::invalid(format!("pair {} references unknown id {id}", pair.pair_id)))
        };
        Ok(PairIx {
            prompt: find(&self.index.prompt, &pair.prompt_id)?,
            y1: find(&self.index.image, &pair.y1)?,
            y2: find(&self.index.image, &pair.y2)?,
        })
    }

    /// One request per (pair, dimension, image). For pair `k` and dimension
    /// `j` the two scores are requests `2(k·|dims| + j)` and the next one.
    pub fn batch(&self, pairs: &[PairIx], dims: &[Dimension]) -> ScoreBatch<'_> {
        let mut prompt_slot: HashMap<usize, usize> = HashMap::new();
        let mut image_slot: HashMap<usize, usize> = HashMap::new();
        let mut batch = ScoreBatch {
            conditions: dims.iter().map(|d| &self.condition_tokens[d.index()]).collect(),
            ..ScoreBatch::default()
        };
        for p in pairs {
            let ps = *prompt_slot.entry(p.prompt).or_insert_with(|| {
                batch.prompts.push(&self.prompt_tokens[p.prompt]);
                batch.prompts.len() - 1
            });
            let mut img = |i: usize| {
                *image_slot.entry(i).or_insert_with(|| {
                    batch.images.push(&self.dataset.pixels[i]);
                    batch.images.len() - 1
                })
            };
            let (a, b) = (img(p.y1), img(p.y2));
            for c in 0..dims.len() {
                for image in [a, b] {
                    batch.requests.push(ScoreRequest {
                        prompt: ps,
                        image,
                        condition: c,
                    });
                }
            }
        }
        batch
    }
}

/// Anything that can score both images of a pair under a dimension.
pub trait PairScorer {
    /// `out[k][j]` holds `[s₁, s₂]` for `pairs[k]` under `dims[j]`.
    fn score_pairs(&self, dataset: &Dataset, pairs: &[&PreferencePair], dims: &[Dimension]) -> Result<Vec<Vec<[f64; 2]>>>;
}

impl MpsModel {
    pub fn score_prepared(&self, prepared: &Prepared<'_>, pairs: &[PairIx], dims: &[Dimension]) -> Result<Vec<Vec<[f64; 2]>>> {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(EVAL_CHUNK) {
            let s = self.score_batch(&prepared.batch(chunk, dims))?;
            for k in 0..chunk.len() {
                out.push(
                    (0..dims.len())
                        .map(|j| {
                            let r = 2 * (k * dims.len() + j);
                            [f64::from(s[r]), f64::from(s[r + 1])]
                        })
                        .collect(),
                );
            }
        }
        Ok(out)
    }
}

impl PairScorer for MpsModel {
    fn score_pairs(&self, dataset: &Dataset, pairs: &[&PreferencePair], dims: &[Dimension]) -> Result<Vec<Vec<[f64; 2]>>> {
        let prepared = Prepared::new(self, dataset)?;
        let ix = pairs.iter().map(|p| prepared.resolve(p)).collect::<Result<Vec<_>>>()?;
        self.score_prepared(&prepared, &ix, dims)
    }
}

/// Scores an image by its hidden teacher quality.
#[derive(Clone, Copy, Debug, Default)]
pub struct TeacherScorer;

impl TeacherScorer {
    pub fn quality(dataset: &Dataset, index: &DatasetIndex, image: &str, d: Dimension) -> Result<f64> {
        let i = index
            .image
            .get(image)
            .ok_or_else(|| Error::invalid(format!("unknown image {image}")))?;
        dataset.images[*i]
            .teacher_q
            .map(|q| q[d.index()])
            .ok_or_else(|| Error::invalid(format!("image {image} has no teacher values")))
    }
}

impl PairScorer for TeacherScorer {
    fn score_pairs(&self, dataset: &Dataset, pairs: &[&PreferencePair], dims: &[Dimension]) -> Result<Vec<Vec<[f64; 2]>>> {
        let index = dataset.index();
        pairs
            .iter()
            .map(|p| {
                dims.iter()
                    .map(|&d| {
                        Ok([
                            Self::quality(dataset, &index, &p.y1, d)?,
                            Self::quality(dataset, &index, &p.y2, d)?,
                        ])
                    })
                    .collect()
            })
            .collect()
    }
}
