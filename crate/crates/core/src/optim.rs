//! AdamW with decoupled weight decay, and a linear-warmup learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment buffers and step count for one [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: AdamWConfig, params: &ParamSet<T>) -> Self {
        let zeros = |p: &crate::params::Param<T>| vec![T::zero(); p.tensor.len()];
        Self {
            config,
            step: 0,
            first: params.iter().map(zeros).collect(),
            second: params.iter().map(zeros).collect(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &[T] {
        &self.first[i]
    }

    pub fn second_moment(&self, i: usize) -> &[T] {
        &self.second[i]
    }
}

/// One AdamW update using the gradients stored on `params`.
///
/// Weight decay multiplies decayed parameters by `1 − lr·λ` before the
/// adaptive step. A missing gradient counts as zero. Any non-finite gradient
/// aborts the step before anything is modified.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamSet<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
) -> Result<()> {
    if state.first.len() != params.len() {
        return Err(Error::invalid("optimizer state built for a different parameter set"));
    }
    for (p, m) in params.iter().zip(&state.first) {
        if m.len() != p.tensor.len() {
            return Err(Error::ParamShape {
                name: p.name.clone(),
                expected: vec![m.len()],
                found: p.tensor.shape().to_vec(),
            });
        }
        if let Some(g) = p.tensor.grad() {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    name: p.name.clone(),
                });
            }
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
    let step_size = T::lit(lr / bc1);
    let bc2_sqrt = T::lit(bc2.sqrt());
    let eps = T::lit(c.eps);
    for (i, p) in params.iter_mut().enumerate() {
        let decay = if p.decay {
            T::lit(1.0 - lr * c.weight_decay)
        } else {
            T::one()
        };
        let grad = p.tensor.grad().map(<[T]>::to_vec);
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        let data = p.tensor.data_mut();
        for j in 0..data.len() {
            let g = grad.as_ref().map_or(T::zero(), |g| g[j]);
            m[j] = b1 * m[j] + one_b1 * g;
            v[j] = b2 * v[j] + one_b2 * g * g;
            let denom = v[j].sqrt() / bc2_sqrt + eps;
            data[j] = data[j] * decay - step_size * m[j] / denom;
        }
    }
    Ok(())
}

/// Linear ramp from 0 at step 0 to `peak` at `warmup`, constant afterwards.
/// A zero `warmup` means no ramp.
pub fn lr_schedule(step: u64, warmup: u64, peak: f64) -> f64 {
    if warmup == 0 || step >= warmup {
        peak
    } else {
        peak * step as f64 / warmup as f64
    }
}
