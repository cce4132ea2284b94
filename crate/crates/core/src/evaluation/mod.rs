//! Accuracy, correlation, reports, ranking, and attention export.

pub mod export;
pub mod metrics;
pub mod rank;
pub mod report;

pub use export::{AttentionExport, attention_export, export_attention};
pub use metrics::{TiePolicy, accuracy_from_scores, pearson_r};
pub use rank::{RankResult, RankedImage, rank_by_scores, rank_images};
pub use report::{EvalReport, fingerprint, per_dimension_report, preference_accuracy, teacher_expected_accuracy};
