//! One-pass evaluation metrics, multi-variant comparisons and diagnostics.

pub mod ablation;
pub mod diagnostics;
pub mod metrics;
pub mod ope;

pub use ablation::{run_ablation, summarize_auc, AblationEntry, AblationRow, AblationTable, SeedSummary};
pub use diagnostics::{overfit_curves, running_mean, score_map_diagnostics, softmax_entropy, OverfitCurves, ScoreMapStats};
pub use metrics::{auc, center_error, curves_are_monotone, iou, precision_curve, success_curve, success_thresholds, SequenceMetrics};
pub use ope::{parallel_map, run_ope, OpeResult, OracleTracker, SequenceTracker, StaticTracker};
