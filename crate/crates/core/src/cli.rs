//! Command-line entry point.
//!
//! Every subcommand reads an optional TOML run configuration with sections
//! `[generator]`, `[model]`, `[train]`, and `[eval]` plus a top-level `seed`.
//! The seed resolves as config < `MPS_SEED` < `--seed` and replaces the
//! generator, training, and initialization seeds. Logs go to stderr as one
//! JSON object per line; results go to stdout or to atomically written files.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataset::{Dataset, GeneratorConfig, Split, category_histogram, generate_synthetic_dataset};
use crate::encoders::vocab::DEFAULT_VOCAB_SIZE;
use crate::encoders::{ConditionSpec, Dimension, EncoderConfig, SyntheticImage, Vocabulary};
use crate::error::{Error, Result};
use crate::evaluation::metrics::TiePolicy;
use crate::evaluation::{export_attention, fingerprint, per_dimension_report, rank_images};
use crate::model::{HeadConfig, MaskMode, ModelConfig, MpsModel};
use crate::scoring::PairScorer;
use crate::training::checkpoint::read_header;
use crate::training::{TrainConfig, Variant, load_checkpoint, train, train_separately};

pub const SEED_ENV: &str = "MPS_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub ln_eps: f64,
    pub max_len: usize,
    pub patch: usize,
    pub vocab_max: usize,
    pub mask_mode: MaskMode,
    pub tau: f64,
    pub straight_through: bool,
    pub soft_lambda: f64,
    pub cross_attention: bool,
    pub alpha_init: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let e = EncoderConfig::default();
        let h = HeadConfig::default();
        let m = ModelConfig::with_vocab(DEFAULT_VOCAB_SIZE);
        Self {
            dim: e.dim,
            layers: e.layers,
            heads: e.heads,
            ffn_mult: e.ffn_mult,
            ln_eps: e.ln_eps,
            max_len: m.max_len,
            patch: m.patch,
            vocab_max: DEFAULT_VOCAB_SIZE,
            mask_mode: h.mask_mode,
            tau: h.tau,
            straight_through: h.straight_through,
            soft_lambda: h.soft_lambda,
            cross_attention: h.cross_attention,
            alpha_init: h.alpha_init,
        }
    }
}

impl ModelSection {
    /// The model configuration for `vocab_size` tokens and square images of
    /// side `image_size`.
    pub fn model_config(&self, vocab_size: usize, image_size: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                dim: self.dim,
                layers: self.layers,
                heads: self.heads,
                ffn_mult: self.ffn_mult,
                ln_eps: self.ln_eps,
            },
            vocab_size,
            max_len: self.max_len,
            image_size,
            patch: self.patch,
            head: HeadConfig {
                mask_mode: self.mask_mode,
                tau: self.tau,
                straight_through: self.straight_through,
                soft_lambda: self.soft_lambda,
                cross_attention: self.cross_attention,
                alpha_init: self.alpha_init,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub split: String,
    pub tie_policy: TiePolicy,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            split: "test".into(),
            tie_policy: TiePolicy::Exclude,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::from_toml(&std::fs::read_to_string(p)?),
            None => Ok(Self::default()),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies the seed precedence and pushes the result into every section.
    pub fn resolve_seed(&mut self, env: Option<&str>, flag: Option<u64>) -> Result<u64> {
        let mut seed = self.seed;
        if let Some(v) = env.filter(|v| !v.is_empty()) {
            seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v} is not an unsigned integer")))?;
        }
        if let Some(f) = flag {
            seed = f;
        }
        self.seed = seed;
        self.generator.seed = seed;
        self.train.seed = seed;
        Ok(seed)
    }
}

#[derive(Debug, Parser)]
#[command(name = "mps", version, about = "Train and query preference-conditioned image scorers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed overriding the config file and MPS_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker cap. Computation is sequential, so results never depend on it.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub threads: u64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and the training log.
        #[arg(long)]
        out: PathBuf,
        /// Training steps, overriding the config.
        #[arg(long)]
        steps: Option<u64>,
        /// Model variant: base, cross-attention, mask, or separate.
        #[arg(long, default_value = "mask")]
        variant: Variant,
    },
    /// Evaluate a checkpoint and write a report.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Report path (JSON).
        #[arg(long)]
        report: PathBuf,
        /// Split to evaluate: train, val, or test. Overrides the config.
        #[arg(long)]
        split: Option<String>,
    },
    /// Score one (prompt, image, condition).
    Score {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file.
        #[arg(long)]
        ckpt: PathBuf,
        /// Prompt text.
        #[arg(long)]
        prompt: String,
        /// Raw image file as written by gen-data.
        #[arg(long)]
        image: PathBuf,
        /// aesthetics, detail, alignment, or overall.
        #[arg(long)]
        condition: Dimension,
    },
    /// Rank every image of one dataset prompt.
    Rank {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Prompt id in the dataset.
        #[arg(long)]
        prompt_id: String,
        /// aesthetics, detail, alignment, or overall.
        #[arg(long)]
        condition: Dimension,
        /// Write the ranking here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export mask values and attention for one (prompt, image, condition).
    ExportAttn {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file.
        #[arg(long)]
        ckpt: PathBuf,
        /// Prompt text.
        #[arg(long)]
        prompt: String,
        /// Raw image file as written by gen-data.
        #[arg(long)]
        image: PathBuf,
        /// aesthetics, detail, alignment, or overall.
        #[arg(long)]
        condition: Dimension,
        /// Output JSON path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a checkpoint's configuration and parameter manifest.
    Inspect {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file.
        #[arg(long)]
        ckpt: PathBuf,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Score { common, .. }
            | Command::Rank { common, .. }
            | Command::ExportAttn { common, .. }
            | Command::Inspect { common, .. } => common,
        }
    }
}

/// One JSON log line on stderr.
pub fn log(event: &str, fields: serde_json::Value) {
    let mut line = json!({ "event": event });
    if let (Some(obj), serde_json::Value::Object(extra)) = (line.as_object_mut(), fields) {
        obj.extend(extra);
    }
    eprintln!("{line}");
}

/// Parses `argv` and runs the subcommand. Returns the process exit code:
/// 0 on success, 1 on a usage error, 2 on a runtime error.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            log("error", json!({ "message": e.to_string() }));
            2
        }
    }
}

fn config_for(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    let env = std::env::var(SEED_ENV).ok();
    cfg.resolve_seed(env.as_deref(), common.seed)?;
    Ok(cfg)
}

fn parse_split(s: &str) -> Result<Split> {
    s.parse()
}

fn print_json<S: Serialize>(value: &S) -> Result<()> {
    use std::io::Write;
    let text = serde_json::to_string_pretty(value)? + "\n";
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

/// Vocabulary built from the training prompts of `data`.
pub fn training_vocabulary(data: &Dataset, max_size: usize) -> Result<Vocabulary> {
    let train_prompts: std::collections::HashSet<&str> = data
        .pairs_in(Split::Train)
        .into_iter()
        .map(|p| p.prompt_id.as_str())
        .collect();
    let corpus: Vec<&str> = data
        .prompts
        .iter()
        .filter(|p| train_prompts.contains(p.id.as_str()))
        .map(|p| p.text.as_str())
        .collect();
    Vocabulary::build(&corpus, max_size)
}

fn run(command: Command) -> Result<()> {
    let cfg = config_for(command.common())?;
    match command {
        Command::GenData { out, .. } => {
            let generated = generate_synthetic_dataset(&cfg.generator)?;
            let ds = &generated.dataset;
            ds.save(&out)?;
            crate::dataset::jsonl::write_jsonl(&out.join("annotations.jsonl"), &generated.annotations)?;
            let hist = category_histogram(&ds.prompts);
            let counts: Vec<usize> = [Split::Train, Split::Val, Split::Test]
                .iter()
                .map(|&s| ds.pairs_in(s).len())
                .collect();
            print_json(&json!({
                "prompts": ds.prompts.len(),
                "images": ds.images.len(),
                "pairs": ds.pairs.len(),
                "train": counts[0],
                "val": counts[1],
                "test": counts[2],
                "same_model_pairs": ds.pairs.iter().filter(|p| p.same_model).count(),
                "categories": hist.counts,
            }))
        }
        Command::Train {
            data,
            out,
            steps,
            variant,
            ..
        } => {
            let mut tc = cfg.train.clone();
            if let Some(s) = steps {
                tc.steps = s;
            }
            let ds = Dataset::load(&data)?;
            let image_size = ds
                .pixels
                .first()
                .map(|p| p.height())
                .ok_or_else(|| Error::invalid("dataset has no images"))?;
            let vocab = training_vocabulary(&ds, cfg.model.vocab_max)?;
            let mut mc = cfg.model.model_config(vocab.len(), image_size)?;
            variant.apply(&mut mc.head);
            let model = MpsModel::new(mc, vocab, cfg.seed)?;
            crate::io_util::write_atomic(&out.join("config.toml"), cfg.to_toml()?.as_bytes())?;
            log(
                "train_start",
                json!({ "seed": cfg.seed, "steps": tc.steps, "variant": variant, "params": model.params.numel() }),
            );
            if variant == Variant::Separate {
                train_separately(&tc, &model, &ds, Some(&out))?;
                log("train_done", json!({ "dimensions": tc.dimensions }));
                return Ok(());
            }
            let outcome = train(&tc, model, &ds, Some(&out))?;
            for e in outcome.log.iter().filter(|e| e.val_accuracy.is_some()) {
                log("validation", serde_json::to_value(e)?);
            }
            log(
                "train_done",
                json!({ "best_step": outcome.best_step, "best_val": outcome.best_val }),
            );
            Ok(())
        }
        Command::Eval {
            ckpt,
            data,
            report,
            split,
            ..
        } => {
            let bytes = std::fs::read(&ckpt)?;
            let (model, _) = crate::training::checkpoint::checkpoint_from_bytes(&bytes)?;
            let ds = Dataset::load(&data)?;
            let split = parse_split(split.as_deref().unwrap_or(&cfg.eval.split))?;
            let pairs = ds.pairs_in(split);
            let config_fp = fingerprint(&serde_json::to_vec(&model.config)?);
            let r = per_dimension_report(&model as &dyn PairScorer, &ds, &pairs, &config_fp, &fingerprint(&bytes))?;
            r.save(&report)?;
            log(
                "eval_done",
                json!({ "pairs": r.pairs, "accuracy": r.dimensions.iter().map(|(d, x)| (d.key(), x.accuracy)).collect::<std::collections::BTreeMap<_, _>>() }),
            );
            Ok(())
        }
        Command::Score {
            ckpt,
            prompt,
            image,
            condition,
            ..
        } => {
            let (model, _) = load_checkpoint(&ckpt)?;
            let img = SyntheticImage::load(&image)?;
            let s = crate::head::mps_score(&prompt, &img, &ConditionSpec::for_dimension(condition), &model)?;
            print_json(&json!({ "condition": condition, "score": f64::from(s) }))
        }
        Command::Rank {
            ckpt,
            data,
            prompt_id,
            condition,
            out,
            ..
        } => {
            let (model, _) = load_checkpoint(&ckpt)?;
            let ds = Dataset::load(&data)?;
            let prompt = ds
                .prompts
                .iter()
                .find(|p| p.id == prompt_id)
                .ok_or_else(|| Error::invalid(format!("unknown prompt {prompt_id}")))?;
            let images: Vec<(&str, &SyntheticImage)> = ds
                .images
                .iter()
                .zip(&ds.pixels)
                .filter(|(r, _)| r.prompt_id == prompt_id)
                .map(|(r, px)| (r.id.as_str(), px))
                .collect();
            let r = rank_images(&model, &prompt.id, &prompt.text, &images, &ConditionSpec::for_dimension(condition))?;
            match out {
                Some(path) => crate::io_util::write_atomic(&path, (serde_json::to_string_pretty(&r)? + "\n").as_bytes()),
                None => print_json(&r),
            }
        }
        Command::ExportAttn {
            ckpt,
            prompt,
            image,
            condition,
            out,
            ..
        } => {
            let (model, _) = load_checkpoint(&ckpt)?;
            let img = SyntheticImage::load(&image)?;
            let e = export_attention(&model, &prompt, &img, &ConditionSpec::for_dimension(condition), &out)?;
            log("export_done", json!({ "tokens": e.tokens.len(), "fallback": e.fallback }));
            Ok(())
        }
        Command::Inspect { ckpt, .. } => {
            let bytes = std::fs::read(&ckpt)?;
            let (header, _) = read_header(&bytes)?;
            let (model, _) = crate::training::checkpoint::checkpoint_from_bytes(&bytes)?;
            print_json(&json!({
                "version": header.version,
                "config": header.config,
                "vocab_size": header.vocab.len(),
                "state": header.state,
                "parameters": model.params.numel(),
                "manifest": header.manifest,
                "fingerprint": fingerprint(&bytes),
            }))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_precedence() {
        let mut c = RunConfig::from_toml("seed = 3").unwrap();
        assert_eq!(c.resolve_seed(None, None).unwrap(), 3);
        assert_eq!(c.resolve_seed(Some("5"), None).unwrap(), 5);
        assert_eq!(c.resolve_seed(Some("5"), Some(9)).unwrap(), 9);
        assert_eq!((c.generator.seed, c.train.seed), (9, 9));
        assert!(c.resolve_seed(Some("x"), None).is_err());
    }

    #[test]
    fn config_sections_round_trip() {
        let text = "seed = 4\n[generator]\nprompts_per_category = 10\n[model]\nmask_mode = \"soft\"\n[train]\nsteps = 7\n[eval]\ntie_policy = \"half-credit\"\n";
        let c = RunConfig::from_toml(text).unwrap();
        assert_eq!(c.generator.prompts_per_category, 10);
        assert_eq!(c.model.mask_mode, MaskMode::Soft);
        assert_eq!(c.train.steps, 7);
        assert_eq!(c.eval.tie_policy, TiePolicy::HalfCredit);
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        assert!(RunConfig::from_toml("[model]\nbogus = 1").is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(dispatch(["mps", "frobnicate"]), 1);
        assert_eq!(dispatch(["mps", "train", "--bogus"]), 1);
        assert_eq!(dispatch(["mps", "--help"]), 0);
        assert_eq!(dispatch(["mps", "inspect", "--ckpt", "/nonexistent/ckpt"]), 2);
    }
}
