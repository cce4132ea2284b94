//! Pre-norm transformer blocks shared by the text and image encoders.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, KeyBias, Segment, Var};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub ln_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 2,
            heads: 4,
            ffn_mult: 4,
            ln_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.layers == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Parameter name to tape variable lookup for one forward pass.
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn new<T: Scalar>(params: &ParamSet<T>, vars: &[Var]) -> Self {
        Self {
            vars: params
                .iter()
                .zip(vars)
                .map(|(p, &v)| (p.name.clone(), v))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Graph(format!("missing parameter {name}")))
    }
}

pub(crate) fn uniform<T: Scalar, R: Rng>(rng: &mut R, shape: [usize; 2], bound: f64) -> Tensor<T> {
    let data = (0..shape[0] * shape[1])
        .map(|_| T::lit(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Weight matrix `fan_in × fan_out` drawn from `U(±1/√fan_in)`.
pub(crate) fn linear<T: Scalar, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<T> {
    uniform(rng, [fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
}

fn push_ln<T: Scalar>(ps: &mut ParamSet<T>, name: &str, dim: usize) {
    ps.push(format!("{name}.g"), Tensor::filled(vec![1, dim], T::one()), false);
    ps.push(format!("{name}.b"), Tensor::zeros(vec![1, dim]), false);
}

/// Adds the block and final-norm parameters under `prefix`.
pub fn init_stack<T: Scalar, R: Rng>(ps: &mut ParamSet<T>, prefix: &str, cfg: &EncoderConfig, rng: &mut R) {
    let d = cfg.dim;
    let hidden = d * cfg.ffn_mult;
    for l in 0..cfg.layers {
        let p = format!("{prefix}.block{l}");
        push_ln(ps, &format!("{p}.ln1"), d);
        for w in ["w_q", "w_k", "w_v", "w_o"] {
            ps.push(format!("{p}.attn.{w}"), linear(rng, d, d), true);
        }
        ps.push(format!("{p}.attn.b_o"), Tensor::zeros(vec![1, d]), false);
        push_ln(ps, &format!("{p}.ln2"), d);
        ps.push(format!("{p}.ffn.w1"), linear(rng, d, hidden), true);
        ps.push(format!("{p}.ffn.b1"), Tensor::zeros(vec![1, hidden]), false);
        ps.push(format!("{p}.ffn.w2"), linear(rng, hidden, d), true);
        ps.push(format!("{p}.ffn.b2"), Tensor::zeros(vec![1, d]), false);
    }
    push_ln(ps, &format!("{prefix}.ln_f"), d);
}

pub(crate) fn layer_norm<T: Scalar>(g: &mut Graph<T>, b: &Bound, name: &str, x: Var, eps: f64) -> Result<Var> {
    let gain = b.get(&format!("{name}.g"))?;
    let bias = b.get(&format!("{name}.b"))?;
    g.layer_norm(x, gain, bias, T::lit(eps))
}

/// Output rows of a stack plus the self-attention node of every block.
pub struct Stacked {
    pub out: Var,
    pub attention: Vec<Var>,
}

/// Runs every block over row-stacked sequences. Rows attend only within
/// their own segment.
pub fn run_stack<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound,
    prefix: &str,
    cfg: &EncoderConfig,
    mut x: Var,
    segments: &[Segment],
) -> Result<Stacked> {
    let mut attention = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let p = format!("{prefix}.block{l}");
        let h = layer_norm(g, b, &format!("{p}.ln1"), x, cfg.ln_eps)?;
        let q = g.matmul(h, b.get(&format!("{p}.attn.w_q"))?)?;
        let k = g.matmul(h, b.get(&format!("{p}.attn.w_k"))?)?;
        let v = g.matmul(h, b.get(&format!("{p}.attn.w_v"))?)?;
        let a = g.attention(q, k, v, cfg.heads, segments, KeyBias::None)?;
        attention.push(a);
        let o = g.matmul(a, b.get(&format!("{p}.attn.w_o"))?)?;
        let o = g.add_row(o, b.get(&format!("{p}.attn.b_o"))?)?;
        x = g.add(x, o)?;

        let h = layer_norm(g, b, &format!("{p}.ln2"), x, cfg.ln_eps)?;
        let f = g.matmul(h, b.get(&format!("{p}.ffn.w1"))?)?;
        let f = g.add_row(f, b.get(&format!("{p}.ffn.b1"))?)?;
        let f = g.gelu(f)?;
        let f = g.matmul(f, b.get(&format!("{p}.ffn.w2"))?)?;
        let f = g.add_row(f, b.get(&format!("{p}.ffn.b2"))?)?;
        x = g.add(x, f)?;
    }
    let out = layer_norm(g, b, &format!("{prefix}.ln_f"), x, cfg.ln_eps)?;
    Ok(Stacked { out, attention })
}

/// Self-attention segments for consecutive blocks of the given lengths.
pub fn self_segments(lengths: impl IntoIterator<Item = usize>) -> Vec<Segment> {
    let mut start = 0;
    lengths
        .into_iter()
        .map(|n| {
            let r = start..start + n;
            start += n;
            Segment {
                queries: r.clone(),
                keys: r,
            }
        })
        .collect()
}
