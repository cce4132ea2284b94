//! Planted-teacher synthetic data.
//!
//! Every image carries four hidden qualities `q ∈ (0, 1)`, one per
//! [`Dimension`], drawn from a correlated Gaussian through a logistic link.
//! Pixels are a gray base plus one visual statistic per quality:
//!
//! - aesthetics: a warm/cool color cast,
//! - detail: vertical stripes whose edges sharpen from sine to square,
//! - alignment: the prompt category's texture motif at strength `q`, mixed
//!   with another category's motif at strength `1 − q`,
//! - overall: a checkerboard artifact that fades as `q` grows.
//!
//! Simulated annotators compare the hidden qualities of the two images.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::annotation::{AnnotationTriple, aggregate_annotators};
use crate::dataset::split::split_dataset;
use crate::dataset::{Category, Dataset, ImageRecord, PairLabels, PreferencePair, Prompt, Split};
use crate::encoders::Dimension;
use crate::encoders::condition::{AESTHETICS_WORDS, ALIGNMENT_WORDS, DETAIL_WORDS};
use crate::encoders::image::{CHANNELS, SyntheticImage};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub prompts_per_category: usize,
    pub images_per_prompt: usize,
    pub same_model_fraction: f64,
    /// Probability that an annotator reverses a comparison.
    pub noise_rate: f64,
    /// Quality gaps below this are annotated as ties.
    pub tie_band: f64,
    pub teacher_seed: u64,
    pub image_size: usize,
    pub split: [f64; 3],
    /// Number of simulated generator models.
    pub models: usize,
    /// Standard deviation of each model's per-dimension latent offset.
    pub model_offset: f64,
    /// Latent correlation in [`Dimension::ALL`] order.
    pub correlation: [[f64; 4]; 4],
    pub pixel_noise: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            prompts_per_category: 100,
            images_per_prompt: 2,
            same_model_fraction: 0.2,
            noise_rate: 0.0,
            tie_band: 0.0,
            teacher_seed: 1,
            image_size: 32,
            split: [0.8, 0.1, 0.1],
            models: 4,
            model_offset: 0.3,
            correlation: DEFAULT_CORRELATION,
            pixel_noise: 0.02,
        }
    }
}

/// Aesthetics, overall, and alignment move together; detail is independent.
pub const DEFAULT_CORRELATION: [[f64; 4]; 4] = [
    [1.0, 0.0, 0.5, 0.8],
    [0.0, 1.0, 0.0, 0.0],
    [0.5, 0.0, 1.0, 0.6],
    [0.8, 0.0, 0.6, 1.0],
];

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.prompts_per_category == 0 {
            return bad("prompts_per_category must be positive");
        }
        if !(2..=4).contains(&self.images_per_prompt) {
            return bad("images_per_prompt must be between 2 and 4");
        }
        if !(0.0..=1.0).contains(&self.same_model_fraction) {
            return bad("same_model_fraction must be in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return bad("noise_rate must be in [0, 1)");
        }
        if !(self.tie_band >= 0.0) || !(self.pixel_noise >= 0.0) || !(self.model_offset >= 0.0) {
            return bad("tie_band, pixel_noise, and model_offset must be non-negative");
        }
        if self.models < 2 {
            return bad("at least two generator models are needed");
        }
        if self.image_size < 8 {
            return bad("image_size must be at least 8");
        }
        cholesky(&self.correlation).map(|_| ())
    }
}

/// Lower-triangular factor of a symmetric positive-definite 4×4 matrix.
pub fn cholesky(a: &[[f64; 4]; 4]) -> Result<[[f64; 4]; 4]> {
    let mut l = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..=i {
            if (a[i][j] - a[j][i]).abs() > 1e-12 {
                return Err(Error::Config("correlation matrix is not symmetric".into()));
            }
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if d <= 0.0 {
                    return Err(Error::Config("correlation matrix is not positive definite".into()));
                }
                l[i][i] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Ok(l)
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    mix(mix(seed ^ mix(stream.wrapping_add(0x9e37_79b9_7f4a_7c15))).wrapping_add(index))
}

const PROMPT_STREAM: u64 = 1;
const IMAGE_STREAM: u64 = 2;
const ANNOTATION_STREAM: u64 = 3;
const TEACHER_STREAM: u64 = 4;

const SUBJECTS: [[&str; 4]; 7] = [
    ["knight", "wizard", "dancer", "sailor"],
    ["valley", "harbor", "canyon", "village"],
    ["lantern", "teapot", "bicycle", "clock"],
    ["tiger", "owl", "fox", "whale"],
    ["orchid", "cactus", "fern", "willow"],
    ["mural", "sculpture", "mosaic", "tapestry"],
    ["pastry", "noodles", "curry", "sushi"],
];

const ADJECTIVES: [&str; 8] = ["bright", "quiet", "ancient", "tiny", "golden", "misty", "bold", "gentle"];

fn pick_two<R: Rng>(rng: &mut R, words: &[&'static str]) -> (&'static str, &'static str) {
    let i = rng.random_range(0..words.len());
    let mut j = rng.random_range(0..words.len() - 1);
    if j >= i {
        j += 1;
    }
    (words[i], words[j])
}

/// A prompt naming `category`, one of its subjects, and two attribute words
/// from each of the aesthetics, detail, and alignment sets.
pub fn prompt_text<R: Rng>(rng: &mut R, category: Category) -> String {
    let subject = SUBJECTS[category.index()][rng.random_range(0..4)];
    let adj = ADJECTIVES[rng.random_range(0..ADJECTIVES.len())];
    let (a1, a2) = pick_two(rng, &AESTHETICS_WORDS);
    let (d1, d2) = pick_two(rng, &DETAIL_WORDS);
    let (s1, s2) = pick_two(rng, &ALIGNMENT_WORDS);
    let cat = category.name();
    match rng.random_range(0..3) {
        0 => format!("{cat}: a {adj} {subject} with {a1} and {a2}, fine {d1} and {d2}, correct {s1} and {s2}"),
        1 => format!("{subject} in {adj} mood from {cat}, {a1} {a2} and sharp {d1} {d2} matching {s1} {s2}"),
        _ => format!("{cat} photo of a {adj} {subject} featuring {a1}, {a2}, {d1}, {d2}, {s1} and {s2}"),
    }
}

const CAST: f64 = 0.12;
const STRIPES: f64 = 0.10;
const TEMPLATE: f64 = 0.12;
const ARTIFACT: f64 = 0.10;

/// Walsh index pairs of each category's 8×8 motif. All are distinct and avoid
/// the x-only functions of the stripes and the `(1, 1)` checkerboard.
const MOTIFS: [(usize, usize); 7] = [(2, 2), (2, 4), (4, 2), (4, 4), (2, 6), (6, 2), (6, 6)];

/// Category `k`'s ±1 motif, tiled every 8 pixels.
fn template(k: usize, x: usize, y: usize) -> f64 {
    let (u, v) = MOTIFS[k];
    if ((u & x % 8).count_ones() + (v & y % 8).count_ones()) % 2 == 0 { 1.0 } else { -1.0 }
}

/// Renders an image whose statistics encode `q` (in [`Dimension::ALL`] order).
pub fn render_image(
    q: [f64; 4],
    category: Category,
    distractor: Category,
    size: usize,
    pixel_noise: f64,
    seed: u64,
) -> Result<SyntheticImage> {
    let [qa, qd, qs, qo] = q;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut px = Vec::with_capacity(size * size * CHANNELS);
    let cast = CAST * (2.0 * qa - 1.0);
    for y in 0..size {
        for x in 0..size {
            let s = (2.0 * std::f64::consts::PI * (x as f64 + 0.5) / 8.0).sin();
            let stripes = STRIPES * (qd * s.signum() + (1.0 - qd) * s);
            let align = TEMPLATE
                * (qs * template(category.index(), x, y)
                    + (1.0 - qs) * template(distractor.index(), x, y));
            let checker = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
            let artifact = ARTIFACT * (1.0 - qo) * checker;
            let lum = 0.5 + stripes + artifact;
            let rgb = [lum + cast, lum + align, lum - cast];
            for v in rgb {
                let n: f64 = StandardNormal.sample(&mut rng);
                px.push((v + pixel_noise * n).clamp(0.0, 1.0) as f32);
            }
        }
    }
    SyntheticImage::new(size, size, px)
}

/// Correlated latents and per-model offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct Teacher {
    chol: [[f64; 4]; 4],
    offsets: Vec<[f64; 4]>,
}

impl Teacher {
    pub fn new(cfg: &GeneratorConfig) -> Result<Self> {
        let chol = cholesky(&cfg.correlation)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.teacher_seed, TEACHER_STREAM, 0));
        let offsets = (0..cfg.models)
            .map(|_| std::array::from_fn(|_| {
                let n: f64 = StandardNormal.sample(&mut rng);
                cfg.model_offset * n
            }))
            .collect::<Vec<[f64; 4]>>();
        Ok(Self { chol, offsets })
    }

    /// Draws `q` for an image of generator `model`.
    pub fn sample<R: Rng>(&self, rng: &mut R, model: usize) -> [f64; 4] {
        let n: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        std::array::from_fn(|i| {
            let z: f64 = (0..=i).map(|k| self.chol[i][k] * n[k]).sum::<f64>() + self.offsets[model][i];
            1.0 / (1.0 + (-1.702 * z).exp())
        })
    }
}

/// Three annotators' 1–5 scores for one pair and dimension.
///
/// Each annotator prefers the image with the higher quality (a tie when the
/// gap is below `tie_band`) and reverses that preference with probability
/// `noise_rate`. Scores sit near `1 + 4·q̄` and respect the preference.
pub fn simulate_annotators<R: Rng>(rng: &mut R, q1: f64, q2: f64, noise_rate: f64, tie_band: f64) -> [(u8, u8); 3] {
    let delta = q1 - q2;
    let base = (1.0 + 4.0 * (q1 + q2) / 2.0).round().clamp(1.0, 5.0) as u8;
    std::array::from_fn(|_| {
        let mut cmp: i8 = if delta.abs() < tie_band || delta == 0.0 {
            0
        } else if delta > 0.0 {
            1
        } else {
            -1
        };
        if rng.random_bool(noise_rate) {
            cmp = -cmp;
        }
        let hi = base.max(2);
        match cmp {
            1 => (hi, hi - 1),
            -1 => (hi - 1, hi),
            _ => (base, base),
        }
    })
}

/// Generated data plus the raw annotations behind every label.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub dataset: Dataset,
    pub annotations: Vec<AnnotationTriple>,
}

pub fn generate_synthetic_dataset(cfg: &GeneratorConfig) -> Result<Generated> {
    cfg.validate()?;
    let teacher = Teacher::new(cfg)?;
    let mut prompts = Vec::new();
    let mut images = Vec::new();
    let mut pixels = Vec::new();
    let mut pairs = Vec::new();
    let mut annotations = Vec::new();
    let mut qs: Vec<[f64; 4]> = Vec::new();
    for (ci, &category) in Category::ALL.iter().enumerate() {
        for k in 0..cfg.prompts_per_category {
            let pi = ci * cfg.prompts_per_category + k;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, PROMPT_STREAM, pi as u64));
            let prompt_id = format!("p{pi:05}");
            prompts.push(Prompt {
                id: prompt_id.clone(),
                text: prompt_text(&mut rng, category),
                category,
            });
            let first_image = images.len();
            let mut model = rng.random_range(0..cfg.models);
            for j in 0..cfg.images_per_prompt {
                if j > 0 && !rng.random_bool(cfg.same_model_fraction) {
                    model = (model + rng.random_range(1..cfg.models)) % cfg.models;
                }
                let q = teacher.sample(&mut rng, model);
                let distractor = Category::ALL[(ci + rng.random_range(1..7)) % 7];
                let id = format!("i{:06}", images.len());
                let seed = derive_seed(cfg.seed, IMAGE_STREAM, images.len() as u64);
                pixels.push(render_image(q, category, distractor, cfg.image_size, cfg.pixel_noise, seed)?);
                images.push((
                    ImageRecord {
                        pixels_path: format!("pixels/{id}.f32"),
                        id,
                        prompt_id: prompt_id.clone(),
                        seed,
                        teacher_q: Some(q),
                    },
                    model,
                ));
                qs.push(q);
            }
            for a in first_image..images.len() {
                for b in a + 1..images.len() {
                    let pair_id = format!("r{:06}", pairs.len());
                    let mut arng =
                        ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, ANNOTATION_STREAM, pairs.len() as u64));
                    let mut triples = Vec::with_capacity(4);
                    for d in Dimension::ALL {
                        let i = d.index();
                        triples.push(AnnotationTriple {
                            pair_id: pair_id.clone(),
                            dimension: d,
                            annotators: simulate_annotators(&mut arng, qs[a][i], qs[b][i], cfg.noise_rate, cfg.tie_band),
                        });
                    }
                    let labels = aggregate_labels(&triples)?;
                    annotations.extend(triples);
                    pairs.push(PreferencePair {
                        pair_id,
                        prompt_id: prompt_id.clone(),
                        y1: images[a].0.id.clone(),
                        y2: images[b].0.id.clone(),
                        labels,
                        split: Split::Train,
                        same_model: images[a].1 == images[b].1,
                    });
                }
            }
        }
    }
    split_dataset(&mut pairs, cfg.split, cfg.seed)?;
    let dataset = Dataset {
        prompts,
        images: images.into_iter().map(|(r, _)| r).collect(),
        pixels,
        pairs,
    };
    dataset.validate()?;
    Ok(Generated { dataset, annotations })
}

fn aggregate_labels(triples: &[AnnotationTriple]) -> Result<PairLabels> {
    let mut out = [None; 4];
    for t in triples {
        out[t.dimension.index()] = Some(aggregate_annotators(t)?);
    }
    let get = |d: Dimension| out[d.index()].ok_or_else(|| Error::invalid(format!("missing {d} annotation")));
    Ok(PairLabels {
        aesthetics: get(Dimension::Aesthetics)?,
        detail: get(Dimension::DetailQuality)?,
        alignment: get(Dimension::SemanticAlignment)?,
        overall: get(Dimension::Overall)?,
    })
}
