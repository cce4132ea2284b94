//! Condition-mask and attention export for one (prompt, image, condition).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::{ConditionSpec, Dimension, SyntheticImage};
use crate::error::{Error, Result};
use crate::model::{MaskMode, MpsModel, ScoreBatch, ScoreRequest};

pub const EXPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenExport {
    pub token: String,
    /// Condition-mask value before binarization (0 with the mask off).
    pub mask_value: f64,
    pub keep: bool,
    /// Head-averaged attention of the image CLS query in the masked cross
    /// attention.
    pub cls_attention: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub schema_version: u32,
    pub prompt: String,
    pub condition: Dimension,
    pub mask_mode: MaskMode,
    pub tau: f64,
    /// True when the mask dropped every token and plain attention was used.
    pub fallback: bool,
    pub tokens: Vec<TokenExport>,
    /// `[rows, cols]` of the patch grid.
    pub patch_grid: [usize; 2],
    /// Head-averaged attention of the image CLS row over the patches in the
    /// last image-encoder block, one inner vector per grid row.
    pub patch_attention: Vec<Vec<f64>>,
    pub score: f64,
}

/// Builds the export by running the scoring pass once.
pub fn attention_export(
    model: &MpsModel,
    prompt: &str,
    image: &SyntheticImage,
    condition: &ConditionSpec,
) -> Result<AttentionExport> {
    let cfg = &model.config;
    if !cfg.head.cross_attention {
        return Err(Error::invalid("the model has no cross attention to export"));
    }
    let p = model.tokenize(prompt)?;
    let c = model.condition_tokens(condition)?;
    let batch = ScoreBatch {
        prompts: vec![&p],
        images: vec![image],
        conditions: vec![&c],
        requests: vec![ScoreRequest {
            prompt: 0,
            image: 0,
            condition: 0,
        }],
    };
    let (g, out) = model.run(&batch)?;
    let n_p = p.len();
    let values: Vec<f64> = match out.relevance[0] {
        Some(r) => g.value(r).data()[..n_p].iter().map(|&x| f64::from(x)).collect(),
        None => vec![0.0; n_p],
    };
    let (fused, _) = out.fusion[0].clone().ok_or_else(|| Error::Graph("missing fusion node".into()))?;
    let seg = &g
        .attention_probs(fused)
        .ok_or_else(|| Error::Graph("fusion node is not an attention op".into()))?[0];
    let heads = cfg.encoder.heads;
    let mut cls_attention = vec![0.0; n_p];
    for h in 0..heads {
        for (j, a) in cls_attention.iter_mut().enumerate() {
            *a += f64::from(seg.probs[h * n_p + j]) / heads as f64;
        }
    }
    let keep: Vec<bool> = match cfg.head.mask_mode {
        MaskMode::Hard if !seg.fallback => values.iter().map(|&v| v >= cfg.head.tau).collect(),
        _ => vec![true; n_p],
    };
    let tokens = p
        .ids()
        .iter()
        .zip(values.iter().zip(&keep))
        .zip(&cls_attention)
        .map(|((&id, (&mask_value, &keep)), &cls_attention)| TokenExport {
            token: model.vocab.token(id).unwrap_or("<unk>").to_string(),
            mask_value,
            keep,
            cls_attention,
        })
        .collect();

    let last = *out
        .image_attention
        .last()
        .ok_or_else(|| Error::Graph("image encoder has no blocks".into()))?;
    let img = &g
        .attention_probs(last)
        .ok_or_else(|| Error::Graph("image block is not an attention op".into()))?[0];
    let rows = cfg.image_rows();
    let side = cfg.image_size / cfg.patch;
    let mut mass = vec![0.0; cfg.n_patches()];
    for h in 0..heads {
        let cls_row = &img.probs[h * rows * rows..h * rows * rows + rows];
        for (m, &a) in mass.iter_mut().zip(&cls_row[1..]) {
            *m += f64::from(a) / heads as f64;
        }
    }
    Ok(AttentionExport {
        schema_version: EXPORT_SCHEMA_VERSION,
        prompt: prompt.to_string(),
        condition: condition.dimension,
        mask_mode: cfg.head.mask_mode,
        tau: cfg.head.tau,
        fallback: seg.fallback,
        tokens,
        patch_grid: [side, side],
        patch_attention: mass.chunks(side).map(<[f64]>::to_vec).collect(),
        score: f64::from(g.value(out.scores).data()[0]),
    })
}

/// Writes [`attention_export`] as JSON to `path`.
pub fn export_attention(
    model: &MpsModel,
    prompt: &str,
    image: &SyntheticImage,
    condition: &ConditionSpec,
    path: &Path,
) -> Result<AttentionExport> {
    let e = attention_export(model, prompt, image, condition)?;
    crate::io_util::write_atomic(path, (serde_json::to_string_pretty(&e)? + "\n").as_bytes())?;
    Ok(e)
}
