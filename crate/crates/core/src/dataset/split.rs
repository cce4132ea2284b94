//! Prompt-level train/val/test assignment.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{PreferencePair, Split};
use crate::error::{Error, Result};

/// Tags every pair with a split so that all pairs of a prompt share one.
///
/// Prompts are shuffled with `seed` and assigned greedily: a prompt goes to
/// the first split whose cumulative pair target is not yet reached. Each split
/// therefore misses its target by less than one prompt's pairs.
pub fn split_dataset(pairs: &mut [PreferencePair], fractions: [f64; 3], seed: u64) -> Result<()> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split fractions {fractions:?} must be in [0, 1] and sum to 1")));
    }
    let mut per_prompt: BTreeMap<&str, usize> = BTreeMap::new();
    for p in pairs.iter() {
        *per_prompt.entry(p.prompt_id.as_str()).or_default() += 1;
    }
    let mut prompts: Vec<(String, usize)> = per_prompt.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    prompts.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let total = pairs.len() as f64;
    let bounds = [fractions[0] * total, (fractions[0] + fractions[1]) * total];
    let mut assigned: BTreeMap<String, Split> = BTreeMap::new();
    let mut cum = 0usize;
    for (id, n) in prompts {
        let c = cum as f64;
        let split = if c < bounds[0] {
            Split::Train
        } else if c < bounds[1] {
            Split::Val
        } else {
            Split::Test
        };
        assigned.insert(id, split);
        cum += n;
    }
    for p in pairs.iter_mut() {
        p.split = assigned[&p.prompt_id];
    }
    Ok(())
}
