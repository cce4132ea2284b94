//! Prompts, images, preference pairs, and their on-disk layout.
//!
//! A dataset directory holds `prompts.jsonl`, `images.jsonl`, `pairs.jsonl`,
//! and one raw pixel file per image under `pixels/`.

pub mod annotation;
pub mod generator;
pub mod jsonl;
pub mod split;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoders::{Dimension, SyntheticImage};
use crate::error::{Error, Result};

pub use annotation::{AnnotationTriple, PreferenceLabel, aggregate_annotators, normalize_annotation};
pub use generator::{GeneratorConfig, Generated, generate_synthetic_dataset};
pub use split::split_dataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Characters,
    Scenes,
    Objects,
    Animals,
    Plants,
    Arts,
    Food,
}

impl Category {
    pub const ALL: [Category; 7] = [
        Category::Characters,
        Category::Scenes,
        Category::Objects,
        Category::Animals,
        Category::Plants,
        Category::Arts,
        Category::Food,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Characters => "characters",
            Category::Scenes => "scenes",
            Category::Objects => "objects",
            Category::Animals => "animals",
            Category::Plants => "plants",
            Category::Arts => "arts",
            Category::Food => "food",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown category `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    pub text: String,
    pub category: Category,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub prompt_id: String,
    /// Relative to the dataset directory.
    pub pixels_path: String,
    pub seed: u64,
    /// Hidden per-dimension quality, in [`Dimension::ALL`] order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_q: Option<[f64; 4]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairLabels {
    pub overall: PreferenceLabel,
    pub aesthetics: PreferenceLabel,
    pub alignment: PreferenceLabel,
    pub detail: PreferenceLabel,
}

impl PairLabels {
    pub fn get(&self, d: Dimension) -> PreferenceLabel {
        match d {
            Dimension::Aesthetics => self.aesthetics,
            Dimension::DetailQuality => self.detail,
            Dimension::SemanticAlignment => self.alignment,
            Dimension::Overall => self.overall,
        }
    }

    pub fn from_fn(mut f: impl FnMut(Dimension) -> PreferenceLabel) -> Self {
        Self {
            aesthetics: f(Dimension::Aesthetics),
            detail: f(Dimension::DetailQuality),
            alignment: f(Dimension::SemanticAlignment),
            overall: f(Dimension::Overall),
        }
    }

    pub fn swapped(&self) -> Self {
        Self::from_fn(|d| self.get(d).swapped())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub pair_id: String,
    pub prompt_id: String,
    pub y1: String,
    pub y2: String,
    pub labels: PairLabels,
    pub split: Split,
    pub same_model: bool,
}

impl PreferencePair {
    /// The same comparison with the images exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            y1: self.y2.clone(),
            y2: self.y1.clone(),
            labels: self.labels.swapped(),
            ..self.clone()
        }
    }
}

/// Per-category prompt counts and the max/min imbalance ratio
/// (`f64::INFINITY` when some category is empty).
#[derive(Clone, Debug, PartialEq)]
pub struct CategoryHistogram {
    pub counts: BTreeMap<Category, usize>,
    pub imbalance: f64,
}

pub fn category_histogram(prompts: &[Prompt]) -> CategoryHistogram {
    let mut counts: BTreeMap<Category, usize> = Category::ALL.iter().map(|&c| (c, 0)).collect();
    for p in prompts {
        *counts.get_mut(&p.category).unwrap() += 1;
    }
    let max = counts.values().copied().max().unwrap_or(0);
    let min = counts.values().copied().min().unwrap_or(0);
    let imbalance = if min == 0 { f64::INFINITY } else { max as f64 / min as f64 };
    CategoryHistogram { counts, imbalance }
}

/// Prompts, images with their pixels, and labeled pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub prompts: Vec<Prompt>,
    pub images: Vec<ImageRecord>,
    /// Parallel to `images`.
    pub pixels: Vec<SyntheticImage>,
    pub pairs: Vec<PreferencePair>,
}

/// Id to position lookups for a [`Dataset`].
pub struct DatasetIndex {
    pub prompt: HashMap<String, usize>,
    pub image: HashMap<String, usize>,
}

impl Dataset {
    pub fn index(&self) -> DatasetIndex {
        DatasetIndex {
            prompt: self.prompts.iter().enumerate().map(|(i, p)| (p.id.clone(), i)).collect(),
            image: self.images.iter().enumerate().map(|(i, r)| (r.id.clone(), i)).collect(),
        }
    }

    /// Checks that every reference resolves and every pair is well formed.
    pub fn validate(&self) -> Result<()> {
        if self.pixels.len() != self.images.len() {
            return Err(Error::invalid("pixel payloads do not match image records"));
        }
        let idx = self.index();
        for r in &self.images {
            if !idx.prompt.contains_key(&r.prompt_id) {
                return Err(Error::invalid(format!("image {} references unknown prompt {}", r.id, r.prompt_id)));
            }
            if let Some(q) = r.teacher_q {
                if q.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::invalid(format!("image {} has teacher values outside [0, 1]", r.id)));
                }
            }
        }
        for p in &self.pairs {
            if p.y1 == p.y2 {
                return Err(Error::invalid(format!("pair {} compares an image with itself", p.pair_id)));
            }
            for y in [&p.y1, &p.y2] {
                let i = idx
                    .image
                    .get(y)
                    .ok_or_else(|| Error::invalid(format!("pair {} references unknown image {y}", p.pair_id)))?;
                if self.images[*i].prompt_id != p.prompt_id {
                    return Err(Error::invalid(format!("pair {} mixes prompts", p.pair_id)));
                }
            }
        }
        Ok(())
    }

    pub fn pairs_in(&self, split: Split) -> Vec<&PreferencePair> {
        self.pairs.iter().filter(|p| p.split == split).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for (r, px) in self.images.iter().zip(&self.pixels) {
            px.save(&dir.join(&r.pixels_path))?;
        }
        jsonl::write_jsonl(&dir.join("prompts.jsonl"), &self.prompts)?;
        jsonl::write_jsonl(&dir.join("images.jsonl"), &self.images)?;
        jsonl::write_jsonl(&dir.join("pairs.jsonl"), &self.pairs)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let prompts = jsonl::read_jsonl(&dir.join("prompts.jsonl"))?;
        let images: Vec<ImageRecord> = jsonl::read_jsonl(&dir.join("images.jsonl"))?;
        let pairs = jsonl::read_jsonl(&dir.join("pairs.jsonl"))?;
        let pixels = images
            .iter()
            .map(|r| SyntheticImage::load(&dir.join(&r.pixels_path)))
            .collect::<Result<_>>()?;
        let ds = Self {
            prompts,
            images,
            pixels,
            pairs,
        };
        ds.validate()?;
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prompt(i: usize, c: Category) -> Prompt {
        Prompt {
            id: format!("p{i}"),
            text: "a dog".into(),
            category: c,
        }
    }

    #[test]
    fn histogram_balanced_and_degenerate() {
        let balanced: Vec<Prompt> = (0..700).map(|i| prompt(i, Category::ALL[i % 7])).collect();
        let h = category_histogram(&balanced);
        assert!(h.counts.values().all(|&c| c == 100));
        assert_eq!(h.imbalance, 1.0);
        assert_eq!(h.counts.values().sum::<usize>(), 700);

        let skewed: Vec<Prompt> = (0..60).map(|i| prompt(i, Category::ALL[i % 6])).collect();
        assert!(category_histogram(&skewed).imbalance.is_infinite());
    }

    #[test]
    fn category_names_round_trip() {
        for c in Category::ALL {
            assert_eq!(c.name().parse::<Category>().unwrap(), c);
            assert_eq!(serde_json::to_string(&c).unwrap(), format!("\"{}\"", c.name()));
        }
    }
}
