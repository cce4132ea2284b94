//! The optimization loop.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, PairTarget};
use crate::dataset::{Dataset, PreferencePair, Split};
use crate::encoders::{Bound, Dimension};
use crate::error::{Error, Result};
use crate::evaluation::metrics::{TiePolicy, accuracy_from_scores};
use crate::model::{MpsModel, ScoreBatch, forward};
use crate::optim::{AdamWConfig, OptimizerState, adamw_step, lr_schedule};
use crate::scoring::{PairIx, PairScorer, Prepared};
use crate::training::checkpoint::{TrainState, save_checkpoint};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: u64,
    pub seed: u64,
    /// Conditions that contribute loss terms.
    pub dimensions: Vec<Dimension>,
    /// Validation cadence in steps; 0 validates only at the end.
    pub eval_every: u64,
    /// Cadence of numbered checkpoints in the output directory; 0 disables.
    pub checkpoint_every: u64,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            lr: 1e-3,
            warmup: 100,
            seed: 0,
            dimensions: Dimension::ALL.to_vec(),
            eval_every: 250,
            checkpoint_every: 0,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.dimensions.is_empty() {
            return Err(Error::Config("at least one dimension must be in scope".into()));
        }
        let mut seen = self.dimensions.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.dimensions.len() {
            return Err(Error::Config("dimensions listed more than once".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config("lr must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Loss targets for `pairs` scored by [`Prepared::batch`].
pub fn pair_targets(pairs: &[&PreferencePair], dims: &[Dimension]) -> Vec<PairTarget> {
    let mut out = Vec::with_capacity(pairs.len() * dims.len());
    for (k, p) in pairs.iter().enumerate() {
        for (j, &d) in dims.iter().enumerate() {
            let r = 2 * (k * dims.len() + j);
            out.push(PairTarget {
                first: r,
                second: r + 1,
                label: p.labels.get(d).p(),
            });
        }
    }
    out
}

/// One forward, backward, and AdamW update. Returns the loss before the update.
pub fn train_step(
    model: &mut MpsModel,
    opt: &mut OptimizerState<f32>,
    batch: &ScoreBatch<'_>,
    targets: &[PairTarget],
    n_pairs: usize,
    lr: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = model.params.register(&mut g)?;
    let b = Bound::new(&model.params, &vars);
    let out = forward(&mut g, &b, &model.config, batch)?;
    let loss = g.pair_kl(out.scores, targets, n_pairs as f64)?;
    let value = f64::from(g.value(loss).item()?);
    g.backward(loss)?;
    model.params.collect_grads(&mut g, &vars)?;
    let res = adamw_step(&mut model.params, opt, lr);
    model.params.clear_grads();
    res?;
    Ok(value)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<BTreeMap<Dimension, f64>>,
}

pub struct TrainOutcome {
    pub final_model: MpsModel,
    pub best_model: MpsModel,
    pub best_step: u64,
    /// Mean validation accuracy of the best model, if a validation split exists.
    pub best_val: Option<f64>,
    pub log: Vec<LogEntry>,
}

/// Validation accuracy per dimension (ties excluded); dimensions whose
/// labels are all ties are left out.
pub fn validation_accuracy(
    model: &MpsModel,
    prepared: &Prepared<'_>,
    pairs: &[&PreferencePair],
    ix: &[PairIx],
    dims: &[Dimension],
) -> Result<BTreeMap<Dimension, f64>> {
    let scores = model.score_prepared(prepared, ix, dims)?;
    let mut out = BTreeMap::new();
    for (j, &d) in dims.iter().enumerate() {
        let s: Vec<[f64; 2]> = scores.iter().map(|row| row[j]).collect();
        let labels: Vec<_> = pairs.iter().map(|p| p.labels.get(d)).collect();
        if let Ok(acc) = accuracy_from_scores(&s, &labels, TiePolicy::Exclude) {
            out.insert(d, acc);
        }
    }
    Ok(out)
}

const SHUFFLE_STREAM: u64 = 0x5348_5546;

/// Trains `model` on the train split of `data`.
///
/// Batches are drawn from seeded per-epoch permutations. Validation runs every
/// `eval_every` steps and at the end; the best mean validation accuracy
/// selects the best model. With `out_dir`, `best`, `final`, and
/// `train_log.jsonl` are written there.
pub fn train(cfg: &TrainConfig, mut model: MpsModel, data: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_pairs = data.pairs_in(Split::Train);
    if train_pairs.is_empty() {
        return Err(Error::invalid("the train split is empty"));
    }
    let val_pairs = data.pairs_in(Split::Val);
    let prepared = Prepared::new(&model, data)?;
    let train_ix = train_pairs.iter().map(|p| prepared.resolve(p)).collect::<Result<Vec<_>>>()?;
    let val_ix = val_pairs.iter().map(|p| prepared.resolve(p)).collect::<Result<Vec<_>>>()?;
    let dims = &cfg.dimensions;

    let rng_seed = crate::dataset::generator::derive_seed(cfg.seed, SHUFFLE_STREAM, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut opt = OptimizerState::new(cfg.optimizer, &model.params);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut log = Vec::new();
    let mut best: Option<(f64, u64, MpsModel)> = None;
    let best_path = out_dir.map(|d| d.join("best"));
    let mut last_good: Option<PathBuf> = None;

    for step in 1..=cfg.steps {
        let mut picked = Vec::with_capacity(cfg.batch_size);
        while picked.len() < cfg.batch_size.min(train_pairs.len()) {
            if cursor == order.len() {
                order = (0..train_pairs.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(order[cursor]);
            cursor += 1;
        }
        let pairs: Vec<&PreferencePair> = picked.iter().map(|&i| train_pairs[i]).collect();
        let ix: Vec<PairIx> = picked.iter().map(|&i| train_ix[i]).collect();
        let batch = prepared.batch(&ix, dims);
        let targets = pair_targets(&pairs, dims);
        let lr = lr_schedule(step, cfg.warmup, cfg.lr);
        let loss = match train_step(&mut model, &mut opt, &batch, &targets, pairs.len(), lr) {
            Ok(l) => l,
            Err(Error::NonFinite { .. }) | Err(Error::NonFiniteGradient { .. }) => {
                return Err(Error::NonFiniteLoss {
                    step,
                    last_good: last_good.clone(),
                });
            }
            Err(e) => return Err(e),
        };
        let mut entry = LogEntry {
            step,
            lr,
            loss,
            val_accuracy: None,
        };
        let evaluate = step == cfg.steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0);
        if evaluate && !val_pairs.is_empty() {
            let acc = validation_accuracy(&model, &prepared, &val_pairs, &val_ix, dims)?;
            if !acc.is_empty() {
                let mean = acc.values().sum::<f64>() / acc.len() as f64;
                if best.as_ref().is_none_or(|(b, _, _)| mean > *b) {
                    best = Some((mean, step, model.clone()));
                    if let Some(p) = &best_path {
                        save_checkpoint(&model, state(step, rng_seed, &rng), p)?;
                        last_good = Some(p.clone());
                    }
                }
            }
            entry.val_accuracy = Some(acc);
        }
        log.push(entry);
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != cfg.steps {
                save_checkpoint(&model, state(step, rng_seed, &rng), &dir.join(format!("step{step:06}")))?;
            }
        }
    }

    let final_state = state(cfg.steps, rng_seed, &rng);
    let (best_val, best_step, best_model) = match best {
        Some((v, s, m)) => (Some(v), s, m),
        None => (None, cfg.steps, model.clone()),
    };
    if let Some(dir) = out_dir {
        save_checkpoint(&model, final_state, &dir.join("final"))?;
        if best_val.is_none() {
            save_checkpoint(&model, final_state, &dir.join("best"))?;
        }
        crate::dataset::jsonl::write_jsonl(&dir.join("train_log.jsonl"), &log)?;
    }
    Ok(TrainOutcome {
        final_model: model,
        best_model,
        best_step,
        best_val,
        log,
    })
}

/// One model per dimension, each trained on that dimension alone.
#[derive(Clone, Debug)]
pub struct SeparateModels {
    pub models: BTreeMap<Dimension, MpsModel>,
}

impl PairScorer for SeparateModels {
    fn score_pairs(&self, dataset: &Dataset, pairs: &[&PreferencePair], dims: &[Dimension]) -> Result<Vec<Vec<[f64; 2]>>> {
        let mut out = vec![Vec::with_capacity(dims.len()); pairs.len()];
        for &d in dims {
            let m = self
                .models
                .get(&d)
                .ok_or_else(|| Error::invalid(format!("no model was trained for {d}")))?;
            for (row, s) in out.iter_mut().zip(m.score_pairs(dataset, pairs, &[d])?) {
                row.push(s[0]);
            }
        }
        Ok(out)
    }
}

/// Trains a fresh copy of `model` for each dimension of `cfg`, writing each
/// run to a subdirectory named after the dimension. Returns the best model
/// of every run.
pub fn train_separately(cfg: &TrainConfig, model: &MpsModel, data: &Dataset, out_dir: Option<&Path>) -> Result<SeparateModels> {
    cfg.validate()?;
    let mut models = BTreeMap::new();
    for &d in &cfg.dimensions {
        let single = TrainConfig {
            dimensions: vec![d],
            ..cfg.clone()
        };
        let dir = out_dir.map(|o| o.join(d.key()));
        let outcome = train(&single, model.clone(), data, dir.as_deref())?;
        models.insert(d, outcome.best_model);
    }
    Ok(SeparateModels { models })
}

fn state(step: u64, rng_seed: u64, rng: &ChaCha8Rng) -> TrainState {
    TrainState {
        step,
        rng_seed,
        rng_word_pos: rng.get_word_pos(),
    }
}
