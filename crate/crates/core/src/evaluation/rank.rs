//! Re-ranking candidate images for a prompt.

use serde::{Deserialize, Serialize};

use crate::encoders::{ConditionSpec, Dimension, SyntheticImage};
use crate::error::{Error, Result};
use crate::model::{MpsModel, ScoreBatch, ScoreRequest};
use crate::scoring::EVAL_CHUNK;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedImage {
    pub id: String,
    pub score: f64,
}

/// Images ordered by descending score; equal scores are ordered by id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankResult {
    pub prompt_id: String,
    pub condition: Dimension,
    pub ranking: Vec<RankedImage>,
}

impl RankResult {
    pub fn top(&self) -> &RankedImage {
        &self.ranking[0]
    }

    pub fn ids(&self) -> Vec<&str> {
        self.ranking.iter().map(|r| r.id.as_str()).collect()
    }
}

/// Orders precomputed scores.
pub fn rank_by_scores(prompt_id: &str, condition: Dimension, ids: &[&str], scores: &[f64]) -> Result<RankResult> {
    if ids.is_empty() {
        return Err(Error::invalid("nothing to rank"));
    }
    if ids.len() != scores.len() {
        return Err(Error::invalid(format!("{} ids for {} scores", ids.len(), scores.len())));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::invalid(format!("image {} has a NaN score", ids[i])));
    }
    let mut ranking: Vec<RankedImage> = ids
        .iter()
        .zip(scores)
        .map(|(id, &score)| RankedImage {
            id: id.to_string(),
            score,
        })
        .collect();
    ranking.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
    Ok(RankResult {
        prompt_id: prompt_id.to_string(),
        condition,
        ranking,
    })
}

/// Scores `images` for `prompt` under `condition` and ranks them.
pub fn rank_images(
    model: &MpsModel,
    prompt_id: &str,
    prompt: &str,
    images: &[(&str, &SyntheticImage)],
    condition: &ConditionSpec,
) -> Result<RankResult> {
    if images.is_empty() {
        return Err(Error::invalid("nothing to rank"));
    }
    let p = model.tokenize(prompt)?;
    let c = model.condition_tokens(condition)?;
    let mut scores = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_CHUNK) {
        let batch = ScoreBatch {
            prompts: vec![&p],
            images: chunk.iter().map(|(_, img)| *img).collect(),
            conditions: vec![&c],
            requests: (0..chunk.len())
                .map(|image| ScoreRequest {
                    prompt: 0,
                    image,
                    condition: 0,
                })
                .collect(),
        };
        scores.extend(model.score_batch(&batch)?.into_iter().map(f64::from));
    }
    let ids: Vec<&str> = images.iter().map(|(id, _)| *id).collect();
    rank_by_scores(prompt_id, condition.dimension, &ids, &scores)
}
