//! Preference accuracy and Pearson correlation.

use serde::{Deserialize, Serialize};

use crate::dataset::PreferenceLabel;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TiePolicy {
    /// Tied labels are not counted.
    #[default]
    Exclude,
    /// Tied labels count as half correct.
    HalfCredit,
}

impl std::str::FromStr for TiePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exclude" => Ok(TiePolicy::Exclude),
            "half-credit" => Ok(TiePolicy::HalfCredit),
            other => Err(Error::invalid(format!("unknown tie policy `{other}`"))),
        }
    }
}

/// Accuracy tally before conversion to a percentage.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AccuracyCount {
    pub correct: f64,
    pub considered: usize,
    pub ties: usize,
}

impl AccuracyCount {
    pub fn percent(&self) -> Result<f64> {
        if self.considered == 0 {
            return Err(Error::invalid("no pairs to score"));
        }
        Ok(100.0 * self.correct / self.considered as f64)
    }
}

/// Index of the higher score; equal scores favor the first image.
pub fn predicted_winner(s: [f64; 2]) -> usize {
    if s[0] >= s[1] { 0 } else { 1 }
}

/// Compares predicted winners with the argmax of each soft label.
pub fn count_accuracy(scores: &[[f64; 2]], labels: &[PreferenceLabel], policy: TiePolicy) -> Result<AccuracyCount> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let mut c = AccuracyCount::default();
    for (s, l) in scores.iter().zip(labels) {
        match l.winner() {
            Some(w) => {
                c.considered += 1;
                if predicted_winner(*s) == w {
                    c.correct += 1.0;
                }
            }
            None => {
                c.ties += 1;
                if policy == TiePolicy::HalfCredit {
                    c.considered += 1;
                    c.correct += 0.5;
                }
            }
        }
    }
    Ok(c)
}

/// Percentage of correctly ordered pairs; errors when nothing is counted.
pub fn accuracy_from_scores(scores: &[[f64; 2]], labels: &[PreferenceLabel], policy: TiePolicy) -> Result<f64> {
    count_accuracy(scores, labels, policy)?.percent()
}

/// Pearson product-moment correlation.
pub fn pearson_r(predicted: &[f64], target: &[f64]) -> Result<f64> {
    let n = predicted.len();
    if n != target.len() || n < 2 {
        return Err(Error::invalid("pearson_r needs two equal-length series of at least two values"));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let (mp, mt) = (mean(predicted), mean(target));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&p, &t) in predicted.iter().zip(target) {
        let (dp, dt) = (p - mp, t - mt);
        sxy += dp * dt;
        sxx += dp * dp;
        syy += dt * dt;
    }
    if syy == 0.0 || sxx == 0.0 {
        return Err(Error::invalid("pearson_r of a constant series"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}
