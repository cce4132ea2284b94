//! Pairwise preference training and checkpoints.

pub mod checkpoint;
pub mod loss;
pub mod trainer;

pub use crate::dataset::PreferenceLabel;
pub use checkpoint::{TrainState, load_checkpoint, load_checkpoint_for, save_checkpoint};
pub use loss::{LossTerm, pair_kl, pair_probabilities, preference_loss};
pub use trainer::{LogEntry, SeparateModels, TrainConfig, TrainOutcome, train, train_separately, train_step};

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::model::{HeadConfig, MaskMode};

/// Model variants compared in the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Image CLS row dotted with the prompt feature; no fusion.
    Base,
    /// Cross attention without a condition mask.
    CrossAttention,
    /// Cross attention with the condition mask (the full model).
    Mask,
    /// The full model trained once per dimension.
    Separate,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Base, Variant::CrossAttention, Variant::Mask, Variant::Separate];

    pub fn key(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::CrossAttention => "cross-attention",
            Variant::Mask => "mask",
            Variant::Separate => "separate",
        }
    }

    /// Adjusts `head` for this variant. Masked variants keep the configured
    /// mask mode, switching `off` to `hard`.
    pub fn apply(self, head: &mut HeadConfig) {
        match self {
            Variant::Base => {
                head.cross_attention = false;
                head.mask_mode = MaskMode::Off;
            }
            Variant::CrossAttention => {
                head.cross_attention = true;
                head.mask_mode = MaskMode::Off;
            }
            Variant::Mask | Variant::Separate => {
                head.cross_attention = true;
                if head.mask_mode == MaskMode::Off {
                    head.mask_mode = MaskMode::Hard;
                }
            }
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "base" => Ok(Variant::Base),
            "cross-attention" | "ca" => Ok(Variant::CrossAttention),
            "mask" => Ok(Variant::Mask),
            "separate" => Ok(Variant::Separate),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}
