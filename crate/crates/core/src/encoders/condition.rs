//! Preference dimensions and the attribute words that describe them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const AESTHETICS_WORDS: [&str; 7] =
    ["light", "color", "clarity", "tone", "style", "ambiance", "artistry"];
pub const DETAIL_WORDS: [&str; 8] =
    ["shape", "face", "hair", "hands", "limbs", "structure", "instance", "texture"];
pub const ALIGNMENT_WORDS: [&str; 5] = ["quantity", "attributes", "position", "number", "location"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dimension {
    #[serde(rename = "aesthetics")]
    Aesthetics,
    #[serde(rename = "detail")]
    DetailQuality,
    #[serde(rename = "alignment")]
    SemanticAlignment,
    #[serde(rename = "overall")]
    Overall,
}

impl Dimension {
    /// Fixed order used for latent vectors and reports.
    pub const ALL: [Dimension; 4] = [
        Dimension::Aesthetics,
        Dimension::DetailQuality,
        Dimension::SemanticAlignment,
        Dimension::Overall,
    ];

    pub fn index(self) -> usize {
        match self {
            Dimension::Aesthetics => 0,
            Dimension::DetailQuality => 1,
            Dimension::SemanticAlignment => 2,
            Dimension::Overall => 3,
        }
    }

    /// Key used in label maps and reports.
    pub fn key(self) -> &'static str {
        match self {
            Dimension::Aesthetics => "aesthetics",
            Dimension::DetailQuality => "detail",
            Dimension::SemanticAlignment => "alignment",
            Dimension::Overall => "overall",
        }
    }

    pub fn words(self) -> Vec<&'static str> {
        match self {
            Dimension::Aesthetics => AESTHETICS_WORDS.to_vec(),
            Dimension::DetailQuality => DETAIL_WORDS.to_vec(),
            Dimension::SemanticAlignment => ALIGNMENT_WORDS.to_vec(),
            Dimension::Overall => all_attribute_words(),
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Dimension {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "aesthetics" | "aesthetic" => Ok(Dimension::Aesthetics),
            "detail" | "detail_quality" | "detailquality" => Ok(Dimension::DetailQuality),
            "alignment" | "semantic_alignment" | "semanticalignment" => {
                Ok(Dimension::SemanticAlignment)
            }
            "overall" => Ok(Dimension::Overall),
            other => Err(Error::invalid(format!("unknown dimension `{other}`"))),
        }
    }
}

/// Union of the three specific word sets, duplicates removed, in listed order.
pub fn all_attribute_words() -> Vec<&'static str> {
    let mut out: Vec<&'static str> = Vec::new();
    for w in AESTHETICS_WORDS.iter().chain(&DETAIL_WORDS).chain(&ALIGNMENT_WORDS) {
        if !out.contains(w) {
            out.push(w);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub dimension: Dimension,
    pub words: Vec<String>,
}

impl ConditionSpec {
    pub fn for_dimension(dimension: Dimension) -> Self {
        Self {
            dimension,
            words: dimension.words().into_iter().map(String::from).collect(),
        }
    }

    /// A user-defined word set reported under `dimension`.
    pub fn custom(dimension: Dimension, words: Vec<String>) -> Result<Self> {
        if words.is_empty() {
            return Err(Error::invalid("condition word set is empty"));
        }
        Ok(Self { dimension, words })
    }

    pub fn text(&self) -> String {
        self.words.join(" ")
    }
}
