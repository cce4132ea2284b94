//! Text and image encoders.
//!
//! Both encoders embed their input into `dim`-wide rows and run a
//! [`stack`] of transformer blocks. Batches are row-stacked without padding;
//! each sequence attends only to itself.

pub mod condition;
pub mod image;
pub mod stack;
pub mod vocab;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{Scalar, Tensor};

pub use condition::{ConditionSpec, Dimension};
pub use image::SyntheticImage;
pub use stack::{Bound, EncoderConfig, Stacked};
pub use vocab::{TokenSequence, Vocabulary};

pub fn init_text<T: Scalar, R: Rng>(
    ps: &mut ParamSet<T>,
    cfg: &EncoderConfig,
    vocab_size: usize,
    max_len: usize,
    rng: &mut R,
) {
    ps.push("text.tok_emb", stack::uniform(rng, [vocab_size, cfg.dim], 1.0), false);
    ps.push("text.pos_emb", stack::uniform(rng, [max_len, cfg.dim], 1.0), false);
    stack::init_stack(ps, "text", cfg, rng);
}

/// Encodes a batch of token sequences into `Σ len × dim` rows.
pub fn text_forward<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound,
    cfg: &EncoderConfig,
    seqs: &[&TokenSequence],
) -> Result<Var> {
    if seqs.is_empty() {
        return Err(Error::invalid("empty text batch"));
    }
    let tok = b.get("text.tok_emb")?;
    let pos = b.get("text.pos_emb")?;
    let (vocab_size, max_len) = (g.value(tok).rows(), g.value(pos).rows());
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    for s in seqs {
        if s.len() > max_len {
            return Err(Error::invalid(format!(
                "sequence of {} tokens exceeds the maximum {max_len}",
                s.len()
            )));
        }
        for (i, &id) in s.ids().iter().enumerate() {
            if id >= vocab_size {
                return Err(Error::TokenOutOfRange {
                    id,
                    size: vocab_size,
                });
            }
            ids.push(id);
            positions.push(i);
        }
    }
    let e = g.gather_rows(tok, &ids)?;
    let p = g.gather_rows(pos, &positions)?;
    let x = g.add(e, p)?;
    let segs = stack::self_segments(seqs.iter().map(|s| s.len()));
    Ok(stack::run_stack(g, b, "text", cfg, x, &segs)?.out)
}

pub fn init_image<T: Scalar, R: Rng>(
    ps: &mut ParamSet<T>,
    cfg: &EncoderConfig,
    patch_dim: usize,
    n_patches: usize,
    rng: &mut R,
) {
    ps.push("image.w_patch", stack::linear(rng, patch_dim, cfg.dim), true);
    ps.push("image.b_patch", Tensor::zeros(vec![1, cfg.dim]), false);
    ps.push("image.cls", stack::uniform(rng, [1, cfg.dim], 1.0), false);
    ps.push("image.pos_emb", stack::uniform(rng, [n_patches + 1, cfg.dim], 1.0), false);
    stack::init_stack(ps, "image", cfg, rng);
}

/// Encodes `patches` (`batch·n_patches × patch_dim`) into
/// `batch·(n_patches + 1)` rows; the first row of each image is its CLS row.
pub fn image_forward<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound,
    cfg: &EncoderConfig,
    patches: Tensor<T>,
    n_patches: usize,
) -> Result<Stacked> {
    let rows = patches.rows();
    if n_patches == 0 || rows == 0 || rows % n_patches != 0 {
        return Err(Error::invalid(format!("{rows} patch rows for {n_patches} patches per image")));
    }
    let batch = rows / n_patches;
    let x = g.constant(patches)?;
    let e = g.matmul(x, b.get("image.w_patch")?)?;
    let e = g.add_row(e, b.get("image.b_patch")?)?;
    let cls = b.get("image.cls")?;
    let all = g.concat_rows(&[cls, e])?;
    let seq = n_patches + 1;
    let mut order = Vec::with_capacity(batch * seq);
    let mut positions = Vec::with_capacity(batch * seq);
    for i in 0..batch {
        order.push(0);
        order.extend((0..n_patches).map(|j| 1 + i * n_patches + j));
        positions.extend(0..seq);
    }
    let x = g.gather_rows(all, &order)?;
    let p = g.gather_rows(b.get("image.pos_emb")?, &positions)?;
    let x = g.add(x, p)?;
    let segs = stack::self_segments(std::iter::repeat_n(seq, batch));
    stack::run_stack(g, b, "image", cfg, x, &segs)
}
