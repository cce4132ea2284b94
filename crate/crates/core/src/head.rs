//! Condition relevance, condition masks, masked cross-attention, and the score.
//!
//! These are the per-example operations, built from primitive tape ops. The
//! batched [`crate::model::forward`] computes the same quantities with a
//! fused attention kernel.

use crate::autodiff::Graph;
use crate::encoders::{ConditionSpec, SyntheticImage};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::model::{MaskMode, MpsModel, ScoreBatch, ScoreRequest};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionParams<T> {
    pub w_c: Tensor<T>,
    pub b_c: T,
    pub tau: f64,
    pub mask_mode: MaskMode,
    pub straight_through: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttentionParams<T> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub heads: usize,
    pub alpha: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionOutput<T> {
    /// `n_v × n_d`, one row per image row.
    pub fused: Tensor<T>,
    /// Row 0 of `fused`.
    pub f_vt: Tensor<T>,
    /// Last row of `X_t`.
    pub f_t: Tensor<T>,
    /// The mask that was applied, after fallback.
    pub mask_used: BinaryMask,
    /// Rows whose mask dropped every token and which used plain attention.
    pub fallback_rows: Vec<usize>,
    /// `heads × n_v × n_p` attention probabilities.
    pub probs: Vec<T>,
}

impl MpsModel {
    pub fn condition_params(&self) -> Result<ConditionParams<f32>> {
        Ok(ConditionParams {
            w_c: self.param("head.w_c")?.clone(),
            b_c: self.param("head.b_c")?.item()?,
            tau: self.config.head.tau,
            mask_mode: self.config.head.mask_mode,
            straight_through: self.config.head.straight_through,
        })
    }

    pub fn cross_attention_params(&self) -> Result<CrossAttentionParams<f32>> {
        Ok(CrossAttentionParams {
            w_q: self.param("head.w_q")?.clone(),
            w_k: self.param("head.w_k")?.clone(),
            w_v: self.param("head.w_v")?.clone(),
            heads: self.config.encoder.heads,
            alpha: self.param("head.alpha")?.item()?,
        })
    }
}

/// `R = X_c W_c X_tᵀ + b_c`, shape `n_c × n_p`.
pub fn relevance<T: Scalar>(x_c: &Tensor<T>, x_t: &Tensor<T>, cp: &ConditionParams<T>) -> Result<Tensor<T>> {
    let d = cp.w_c.rows();
    if x_c.cols() != d || x_t.cols() != d || cp.w_c.cols() != d {
        return Err(Error::shape(
            "relevance",
            format!("X_c {:?}, X_t {:?}, W_c {:?}", x_c.shape(), x_t.shape(), cp.w_c.shape()),
        ));
    }
    let mut r = x_c.matmul(&cp.w_c)?.matmul(&x_t.transpose()?)?;
    for v in r.data_mut() {
        *v = *v + cp.b_c;
    }
    Ok(r)
}

/// Column means of `r`, repeated on `n_v` rows.
pub fn build_condition_mask<T: Scalar>(r: &Tensor<T>, n_v: usize) -> Result<Tensor<T>> {
    let (n_c, n_p) = r.dims2()?;
    if n_v == 0 || n_c == 0 {
        return Err(Error::invalid("condition mask needs at least one row on each side"));
    }
    let inv = T::lit(1.0 / n_c as f64);
    let mut mean = vec![T::zero(); n_p];
    for i in 0..n_c {
        for (m, &x) in mean.iter_mut().zip(r.row(i)) {
            *m = *m + x;
        }
    }
    for m in &mut mean {
        *m = *m * inv;
    }
    Tensor::new(vec![n_v, n_p], mean.repeat(n_v))
}

/// Entries below `tau` are dropped; the rest are kept. Returned as a
/// [`BinaryMask`], whose additive form has `−∞` at dropped entries.
pub fn binarize_mask<T: Scalar>(m: &Tensor<T>, tau: f64) -> Result<BinaryMask> {
    if tau.is_nan() {
        return Err(Error::invalid("threshold is NaN"));
    }
    let (rows, cols) = m.dims2()?;
    BinaryMask::new(rows, cols, m.data().iter().map(|x| x.as_f64() >= tau).collect())
}

/// Multi-head cross attention of image rows over prompt tokens with a
/// binary mask. Fully masked rows fall back to unmasked attention.
pub fn masked_cross_attention<T: Scalar>(
    x_v: &Tensor<T>,
    x_t: &Tensor<T>,
    mask: &BinaryMask,
    cap: &CrossAttentionParams<T>,
) -> Result<FusionOutput<T>> {
    let (n_v, d) = x_v.dims2()?;
    let (n_p, d_t) = x_t.dims2()?;
    if d_t != d || mask.rows() != n_v || mask.cols() != n_p || n_p == 0 || n_v == 0 {
        return Err(Error::shape(
            "masked_cross_attention",
            format!("X_v {n_v}×{d}, X_t {n_p}×{d_t}, mask {}×{}", mask.rows(), mask.cols()),
        ));
    }
    if cap.heads == 0 || d % cap.heads != 0 {
        return Err(Error::shape("masked_cross_attention", format!("{d} columns, {} heads", cap.heads)));
    }
    let fallback_rows = mask.fully_masked_rows();
    let mut keep = mask.keep().to_vec();
    for &r in &fallback_rows {
        keep[r * n_p..(r + 1) * n_p].fill(true);
    }
    let mask_used = BinaryMask::new(n_v, n_p, keep)?;

    let mut g = Graph::<T>::new();
    let xv = g.constant(x_v.clone())?;
    let xt = g.constant(x_t.clone())?;
    let wq = g.constant(cap.w_q.clone())?;
    let wk = g.constant(cap.w_k.clone())?;
    let wv = g.constant(cap.w_v.clone())?;
    let q = g.matmul(xv, wq)?;
    let k = g.matmul(xt, wk)?;
    let v = g.matmul(xt, wv)?;
    let dh = d / cap.heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(cap.heads);
    let mut probs = Vec::with_capacity(cap.heads * n_v * n_p);
    for h in 0..cap.heads {
        let cols = h * dh..(h + 1) * dh;
        let qh = g.slice_cols(q, cols.clone())?;
        let kh = g.slice_cols(k, cols.clone())?;
        let vh = g.slice_cols(v, cols)?;
        let logits = g.matmul_t(qh, kh)?;
        let logits = g.scale(logits, scale)?;
        let p = g.masked_softmax_rows(logits, &mask_used)?;
        probs.extend_from_slice(g.value(p).data());
        outs.push(g.matmul(p, vh)?);
    }
    let fused = g.concat_cols(&outs)?;
    let fused = g.value(fused).clone();
    let f_vt = Tensor::new(vec![1, d], fused.row(0).to_vec())?;
    let f_t = Tensor::new(vec![1, d], x_t.row(n_p - 1).to_vec())?;
    Ok(FusionOutput {
        fused,
        f_vt,
        f_t,
        mask_used,
        fallback_rows,
        probs,
    })
}

/// The per-example pipeline up to fusion: encode, relevance, mask, attend.
/// Also returns the pre-binarization mask row.
pub fn fuse(
    model: &MpsModel,
    prompt: &str,
    image: &SyntheticImage,
    condition: &ConditionSpec,
) -> Result<(FusionOutput<f32>, Vec<f32>)> {
    let x_t = model.encode_text(&model.tokenize(prompt)?)?;
    let x_v = model.encode_image(image)?;
    let n_v = x_v.rows();
    let n_p = x_t.rows();
    let cap = model.cross_attention_params()?;
    let cp = model.condition_params()?;
    if cp.mask_mode == MaskMode::Soft {
        return Err(Error::invalid(
            "per-example fusion covers hard and off masks; soft masks are scored through the batched path",
        ));
    }
    let (mask, values) = match cp.mask_mode {
        MaskMode::Off => (BinaryMask::all_kept(n_v, n_p), vec![0.0; n_p]),
        MaskMode::Hard | MaskMode::Soft => {
            let x_c = model.encode_condition(condition)?;
            let m = build_condition_mask(&relevance(&x_c, &x_t, &cp)?, n_v)?;
            let values = m.row(0).to_vec();
            (binarize_mask(&m, cp.tau)?, values)
        }
    };
    Ok((masked_cross_attention(&x_v, &x_t, &mask, &cap)?, values))
}

/// `S = α · f_vt · f_tᵀ` for one (prompt, image, condition).
pub fn mps_score(prompt: &str, image: &SyntheticImage, condition: &ConditionSpec, model: &MpsModel) -> Result<f32> {
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
    Ok(model.score_batch(&batch)?[0])
}

/// The score from an already computed fusion.
pub fn score_from_fusion<T: Scalar>(fusion: &FusionOutput<T>, alpha: T) -> T {
    let dot = fusion
        .f_vt
        .data()
        .iter()
        .zip(fusion.f_t.data())
        .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
    alpha * dot
}
