//! Per-annotator normalization and three-way aggregation of 1–5 scores.

use serde::{Deserialize, Serialize};

use crate::encoders::Dimension;
use crate::error::{Error, Result};

/// Soft label `[p₁, p₂]` with `p₁ + p₂ = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct PreferenceLabel {
    p: [f64; 2],
}

impl PreferenceLabel {
    pub const FIRST: PreferenceLabel = PreferenceLabel { p: [1.0, 0.0] };
    pub const SECOND: PreferenceLabel = PreferenceLabel { p: [0.0, 1.0] };
    pub const TIE: PreferenceLabel = PreferenceLabel { p: [0.5, 0.5] };

    pub fn new(p1: f64, p2: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p1) || !(0.0..=1.0).contains(&p2) || (p1 + p2 - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("invalid preference label [{p1}, {p2}]")));
        }
        Ok(Self { p: [p1, p2] })
    }

    /// `[p, 1 − p]`.
    pub fn from_first(p1: f64) -> Result<Self> {
        Self::new(p1, 1.0 - p1)
    }

    pub fn p(&self) -> [f64; 2] {
        self.p
    }

    pub fn swapped(&self) -> Self {
        Self {
            p: [self.p[1], self.p[0]],
        }
    }

    pub fn is_tie(&self) -> bool {
        self.p[0] == self.p[1]
    }

    /// Index of the preferred image, `None` for ties.
    pub fn winner(&self) -> Option<usize> {
        match self.p[0].partial_cmp(&self.p[1]) {
            Some(std::cmp::Ordering::Greater) => Some(0),
            Some(std::cmp::Ordering::Less) => Some(1),
            _ => None,
        }
    }
}

impl TryFrom<[f64; 2]> for PreferenceLabel {
    type Error = Error;

    fn try_from(p: [f64; 2]) -> Result<Self> {
        Self::new(p[0], p[1])
    }
}

impl From<PreferenceLabel> for [f64; 2] {
    fn from(l: PreferenceLabel) -> Self {
        l.p
    }
}

/// `(4, 2) → [1, 0]`, `(3, 3) → [0.5, 0.5]`, `(1, 5) → [0, 1]`.
pub fn normalize_annotation(score1: u8, score2: u8) -> Result<PreferenceLabel> {
    for s in [score1, score2] {
        if !(1..=5).contains(&s) {
            return Err(Error::invalid(format!("annotation score {s} outside 1..=5")));
        }
    }
    Ok(match score1.cmp(&score2) {
        std::cmp::Ordering::Greater => PreferenceLabel::FIRST,
        std::cmp::Ordering::Less => PreferenceLabel::SECOND,
        std::cmp::Ordering::Equal => PreferenceLabel::TIE,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationTriple {
    pub pair_id: String,
    pub dimension: Dimension,
    /// `(score₁, score₂)` per annotator.
    pub annotators: [(u8, u8); 3],
}

/// Mean of the three normalized labels.
///
/// Each normalized `p₁` is a multiple of one half, so the mean is `k/6` for an
/// integer `k`; it is computed from `k` directly so that the components sum to
/// one exactly.
pub fn aggregate_annotators(triple: &AnnotationTriple) -> Result<PreferenceLabel> {
    let mut halves = 0u32;
    for &(a, b) in &triple.annotators {
        halves += (normalize_annotation(a, b)?.p()[0] * 2.0) as u32;
    }
    let p1 = f64::from(halves) / 6.0;
    let p2 = f64::from(6 - halves) / 6.0;
    Ok(PreferenceLabel { p: [p1, p2] })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triple(a: [(u8, u8); 3]) -> AnnotationTriple {
        AnnotationTriple {
            pair_id: "p".into(),
            dimension: Dimension::Overall,
            annotators: a,
        }
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_annotation(4, 2).unwrap().p(), [1.0, 0.0]);
        assert_eq!(normalize_annotation(3, 3).unwrap().p(), [0.5, 0.5]);
        assert_eq!(normalize_annotation(1, 5).unwrap().p(), [0.0, 1.0]);
        assert!(normalize_annotation(0, 3).is_err());
        assert!(normalize_annotation(3, 6).is_err());
    }

    #[test]
    fn aggregation_examples() {
        let l = aggregate_annotators(&triple([(5, 1), (4, 3), (2, 2)])).unwrap();
        assert!((l.p()[0] - 5.0 / 6.0).abs() < 1e-15 && (l.p()[1] - 1.0 / 6.0).abs() < 1e-15);
        let l = aggregate_annotators(&triple([(5, 1), (4, 3), (2, 1)])).unwrap();
        assert_eq!(l.p(), [1.0, 0.0]);
        let l = aggregate_annotators(&triple([(5, 1), (1, 3), (2, 2)])).unwrap();
        assert_eq!(l.p(), [0.5, 0.5]);
    }

    #[test]
    fn label_json_is_a_pair() {
        let l = PreferenceLabel::from_first(0.25).unwrap();
        let s = serde_json::to_string(&l).unwrap();
        assert_eq!(s, "[0.25,0.75]");
        assert_eq!(serde_json::from_str::<PreferenceLabel>(&s).unwrap(), l);
        assert!(serde_json::from_str::<PreferenceLabel>("[0.9,0.9]").is_err());
    }

    proptest::proptest! {
        #[test]
        fn normalization_is_antisymmetric(a in 1u8..=5, b in 1u8..=5) {
            let ab = normalize_annotation(a, b).unwrap();
            let ba = normalize_annotation(b, a).unwrap();
            proptest::prop_assert_eq!(ab, ba.swapped());
        }
    }
}
