//! Finite-difference verification of analytic gradients.
//!
//! Analytic gradients may be computed in either precision; the central
//! differences `(f(θ+ε) − f(θ−ε)) / 2ε` they are compared with are always
//! evaluated in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Scalar;

/// A scalar loss that can be built on a tape in any precision.
pub trait Objective {
    fn loss<T: Scalar>(&self, g: &mut Graph<T>, params: &ParamSet<T>, vars: &[Var]) -> Result<Var>;
}

/// Adapts an `f64` closure to [`Objective`] (evaluated in `f64` only).
pub struct FnObjective<F>(pub F);

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub probes: usize,
    pub eps: f64,
    pub seed: u64,
    /// Denominator floor of the relative error, so that two near-zero
    /// gradients do not produce a large ratio.
    pub floor: f64,
    /// Parameters excluded from probing.
    pub skip: Vec<String>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            probes: 64,
            eps: 1e-4,
            seed: 0,
            floor: 1e-6,
            skip: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&Probe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval_loss<O: Objective, T: Scalar>(obj: &O, params: &ParamSet<T>) -> Result<f64> {
    let mut g = Graph::<T>::new();
    let vars = params.register(&mut g)?;
    let loss = obj.loss(&mut g, params, &vars)?;
    Ok(g.value(loss).item()?.as_f64())
}

fn eval_grads<O: Objective, T: Scalar>(obj: &O, params: &ParamSet<T>) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::<T>::new();
    let vars = params.register(&mut g)?;
    let loss = obj.loss(&mut g, params, &vars)?;
    g.backward(loss)?;
    Ok(vars
        .iter()
        .zip(params.iter())
        .map(|(&v, p)| match g.grad(v) {
            Some(gr) => gr.iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; p.tensor.len()],
        })
        .collect())
}

/// Compares gradients computed in precision `T` against `f64` central
/// differences on randomly chosen coordinates.
///
/// Each probe picks a parameter uniformly (ignoring `cfg.skip`) and then a
/// coordinate within it. The forward is evaluated twice up front; differing
/// results are reported as [`Error::NonDeterministic`].
pub fn grad_check<T: Scalar, O: Objective>(
    obj: &O,
    params: &ParamSet<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if !(1e-6..=1e-3).contains(&cfg.eps) {
        return Err(Error::invalid(format!("eps {} outside [1e-6, 1e-3]", cfg.eps)));
    }
    let first = eval_loss(obj, params)?;
    let second = eval_loss(obj, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    let analytic = eval_grads(obj, &params.cast::<T>())?;
    let candidates: Vec<usize> = params
        .iter()
        .enumerate()
        .filter(|(_, p)| !cfg.skip.contains(&p.name))
        .map(|(i, _)| i)
        .collect();
    if candidates.is_empty() {
        return Err(Error::invalid("no parameters to probe"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probes = Vec::with_capacity(cfg.probes);
    let mut work = params.clone();
    for _ in 0..cfg.probes {
        let pi = candidates[rng.random_range(0..candidates.len())];
        let len = params.at(pi).tensor.len();
        let j = rng.random_range(0..len);
        let orig = params.at(pi).tensor.data()[j];
        work.at_mut(pi).tensor.data_mut()[j] = orig + cfg.eps;
        let plus = eval_loss(obj, &work)?;
        work.at_mut(pi).tensor.data_mut()[j] = orig - cfg.eps;
        let minus = eval_loss(obj, &work)?;
        work.at_mut(pi).tensor.data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * cfg.eps);
        let a = analytic[pi][j];
        probes.push(Probe {
            param: params.at(pi).name.clone(),
            index: j,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric, cfg.floor),
        });
    }
    let max_rel_error = probes.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        probes,
    })
}

/// [`grad_check`] for an `f64` closure.
pub fn grad_check_fn<F>(f: F, params: &ParamSet<f64>, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check::<f64, _>(&FnObjective(f), params, cfg)
}

impl<F> Objective for FnObjective<F>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    fn loss<T: Scalar>(&self, g: &mut Graph<T>, _params: &ParamSet<T>, vars: &[Var]) -> Result<Var> {
        // Only f64 tapes are supported by plain closures.
        let g64 = (g as &mut dyn std::any::Any)
            .downcast_mut::<Graph<f64>>()
            .ok_or_else(|| Error::invalid("closure objectives run in f64 only"))?;
        (self.0)(g64, vars)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn theta(v: f64) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        ps.push("theta", Tensor::scalar(v), false);
        ps
    }

    #[test]
    fn quadratic_is_exact() {
        let cfg = GradCheckConfig {
            probes: 4,
            eps: 1e-4,
            ..Default::default()
        };
        let rep = grad_check_fn(|g, v| g.mul(v[0], v[0]), &theta(3.0), &cfg).unwrap();
        assert!(rep.max_rel_error < 1e-6, "{rep:?}");
        assert!((rep.probes[0].analytic - 6.0).abs() < 1e-12);
    }

    #[test]
    fn linear_matches() {
        let cfg = GradCheckConfig {
            probes: 2,
            ..Default::default()
        };
        let rep = grad_check_fn(|g, v| g.scale(v[0], 5.0), &theta(-1.25), &cfg).unwrap();
        assert!(rep.max_rel_error < 1e-9);
        assert_eq!(rep.probes[0].analytic, 5.0);
    }

    #[test]
    fn eps_out_of_range_is_rejected() {
        let cfg = GradCheckConfig {
            eps: 1e-2,
            ..Default::default()
        };
        assert!(grad_check_fn(|g, v| g.mul(v[0], v[0]), &theta(1.0), &cfg).is_err());
    }

    #[test]
    fn detects_nondeterminism() {
        use std::sync::atomic::{AtomicU64, Ordering};
        let calls = AtomicU64::new(0);
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let n = calls.fetch_add(1, Ordering::SeqCst) as f64;
            g.scale(v[0], 1.0 + n)
        };
        let err = grad_check_fn(f, &theta(1.0), &GradCheckConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }
}
