//! Pairwise probabilities and the KL preference objective.

use crate::autodiff::PROB_CLAMP;
use crate::dataset::PreferenceLabel;
use crate::error::{Error, Result};

/// Two-way softmax of `(s₁, s₂)`.
pub fn pair_probabilities(s1: f64, s2: f64) -> Result<[f64; 2]> {
    if !s1.is_finite() || !s2.is_finite() {
        return Err(Error::NonFinite { op: "pair_probabilities" });
    }
    let m = s1.max(s2);
    let (e1, e2) = ((s1 - m).exp(), (s2 - m).exp());
    let z = e1 + e2;
    Ok([e1 / z, e2 / z])
}

/// `Σᵢ pᵢ (ln pᵢ − ln p̂ᵢ)` with `0 · ln 0 = 0` and `p̂` clamped to
/// `[PROB_CLAMP, 1 − PROB_CLAMP]`.
pub fn pair_kl(p: [f64; 2], p_hat: [f64; 2]) -> f64 {
    p.iter()
        .zip(&p_hat)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).ln()))
        .sum()
}

/// One pair under one condition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerm {
    pub p_hat: [f64; 2],
    pub label: PreferenceLabel,
}

/// Sum over conditions of the per-pair KL, averaged over pairs.
///
/// `terms[k]` holds every condition's term for pair `k`.
pub fn preference_loss(terms: &[Vec<LossTerm>]) -> Result<f64> {
    if terms.is_empty() {
        return Err(Error::invalid("empty loss batch"));
    }
    let total: f64 = terms
        .iter()
        .flat_map(|pair| pair.iter())
        .map(|t| pair_kl(t.label.p(), t.p_hat))
        .sum();
    Ok(total / terms.len() as f64)
}
