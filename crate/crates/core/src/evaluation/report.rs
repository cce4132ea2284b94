//! Per-dimension evaluation reports.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Dataset, PreferencePair};
use crate::encoders::Dimension;
use crate::error::{Error, Result};
use crate::evaluation::metrics::{TiePolicy, count_accuracy, pearson_r};
use crate::scoring::PairScorer;
use crate::training::loss::pair_probabilities;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Hex SHA-256 of `bytes`.
pub fn fingerprint(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimensionReport {
    /// Percentage with tied labels excluded.
    pub accuracy: Option<f64>,
    /// Percentage with tied labels counted as half correct.
    pub accuracy_half_credit: f64,
    /// Correlation of predicted and annotated first-image probabilities;
    /// `None` when either series is constant.
    pub pearson_r: Option<f64>,
    pub pairs: usize,
    pub ties: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub pairs: usize,
    pub dimensions: BTreeMap<Dimension, DimensionReport>,
    pub config_fingerprint: String,
    pub checkpoint_fingerprint: String,
}

impl EvalReport {
    pub fn accuracy(&self, d: Dimension) -> Option<f64> {
        self.dimensions.get(&d).and_then(|r| r.accuracy)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::invalid(format!("report schema {} is not supported", r.schema_version)));
        }
        Ok(r)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io_util::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Percentage of `pairs` whose predicted winner under `d` matches the label.
pub fn preference_accuracy<S: PairScorer + ?Sized>(
    scorer: &S,
    dataset: &Dataset,
    pairs: &[&PreferencePair],
    d: Dimension,
    policy: TiePolicy,
) -> Result<f64> {
    let scores: Vec<[f64; 2]> = scorer
        .score_pairs(dataset, pairs, &[d])?
        .into_iter()
        .map(|row| row[0])
        .collect();
    let labels: Vec<_> = pairs.iter().map(|p| p.labels.get(d)).collect();
    count_accuracy(&scores, &labels, policy)?.percent()
}

/// Accuracy under both tie policies and correlation for every dimension.
pub fn per_dimension_report<S: PairScorer + ?Sized>(
    scorer: &S,
    dataset: &Dataset,
    pairs: &[&PreferencePair],
    config_fingerprint: &str,
    checkpoint_fingerprint: &str,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("no pairs to evaluate"));
    }
    let scores = scorer.score_pairs(dataset, pairs, &Dimension::ALL)?;
    let mut dimensions = BTreeMap::new();
    for (j, &d) in Dimension::ALL.iter().enumerate() {
        let s: Vec<[f64; 2]> = scores.iter().map(|row| row[j]).collect();
        let labels: Vec<_> = pairs.iter().map(|p| p.labels.get(d)).collect();
        let strict = count_accuracy(&s, &labels, TiePolicy::Exclude)?;
        let half = count_accuracy(&s, &labels, TiePolicy::HalfCredit)?;
        let predicted = s
            .iter()
            .map(|&[a, b]| pair_probabilities(a, b).map(|p| p[0]))
            .collect::<Result<Vec<_>>>()?;
        let target: Vec<f64> = labels.iter().map(|l| l.p()[0]).collect();
        dimensions.insert(
            d,
            DimensionReport {
                accuracy: strict.percent().ok(),
                accuracy_half_credit: half.percent()?,
                pearson_r: pearson_r(&predicted, &target).ok(),
                pairs: pairs.len(),
                ties: strict.ties,
            },
        );
    }
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        pairs: pairs.len(),
        dimensions,
        config_fingerprint: config_fingerprint.to_string(),
        checkpoint_fingerprint: checkpoint_fingerprint.to_string(),
    })
}

/// Expected accuracy (%) of the teacher against labels from three
/// annotators who each flip their preference with probability `rho`.
///
/// Each annotator's label is one-hot, so the averaged label always has a
/// strict majority and the teacher is right exactly when at least two
/// annotators did not flip.
pub fn teacher_expected_accuracy(rho: f64) -> f64 {
    let keep = 1.0 - rho;
    100.0 * (keep.powi(3) + 3.0 * rho * keep.powi(2))
}
