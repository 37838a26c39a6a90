use serde::{Deserialize, Serialize};

use super::ope::{run_ope, OpeResult};
use crate::data::Sequence;
use crate::error::{Error, Result};
use crate::net::NetConfig;
use crate::params::Params;
use crate::tracking::{Tracker, TrackerConfig};
use crate::training::Variant;

/// A trained model entered into the comparison.
pub struct AblationEntry<'a> {
    pub label: String,
    pub variant: Variant,
    pub params: Option<&'a Params>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub variant: Variant,
    pub precision_at_20: f64,
    pub auc: f64,
    pub result: OpeResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,precision_at_20,success_auc\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:.4},{:.4}\n", r.label, r.precision_at_20, r.auc));
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| variant | precision@20 | success AUC |\n|---|---|---|\n");
        for r in &self.rows {
            out.push_str(&format!("| {} | {:.3} | {:.3} |\n", r.label, r.precision_at_20, r.auc));
        }
        out
    }
}

/// OPE of every entry on the same suite.
pub fn run_ablation(
    entries: &[AblationEntry],
    net: &NetConfig,
    tracker: &TrackerConfig,
    sequences: &[Sequence],
    workers: usize,
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(entries.len());
    for e in entries {
        let params = e
            .params
            .ok_or_else(|| Error::InvalidArgument(format!("no checkpoint for variant `{}`", e.label)))?;
        let t = Tracker::new(params, net, e.variant, tracker.clone())?;
        let result = run_ope(&t, sequences, workers);
        log::info!("{}: precision@20 {:.3}, AUC {:.3}", e.label, result.precision_at_20, result.auc);
        rows.push(AblationRow {
            label: e.label.clone(),
            variant: e.variant,
            precision_at_20: result.precision_at_20,
            auc: result.auc,
            result,
        });
    }
    Ok(AblationTable { rows })
}

/// Mean and sample standard deviation of one variant's scores across
/// seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub label: String,
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl SeedSummary {
    pub fn new(label: &str, values: Vec<f64>) -> SeedSummary {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n.max(1) as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        SeedSummary {
            label: label.to_string(),
            values,
            mean,
            std,
        }
    }

    /// Whether this mean exceeds `other`'s by more than either spread.
    pub fn beats(&self, other: &SeedSummary) -> bool {
        self.mean - other.mean > self.std.max(other.std)
    }
}

/// Per-label AUC across seed tables, optionally restricted to sequences
/// carrying attribute `subset`.
pub fn summarize_auc(tables: &[AblationTable], subset: Option<&str>) -> Vec<SeedSummary> {
    let Some(first) = tables.first() else {
        return Vec::new();
    };
    first
        .rows
        .iter()
        .map(|r| {
            let values = tables
                .iter()
                .filter_map(|t| t.row(&r.label))
                .map(|row| match subset {
                    Some(a) => row.result.subset(a).auc,
                    None => row.auc,
                })
                .collect();
            SeedSummary::new(&r.label, values)
        })
        .collect()
}
