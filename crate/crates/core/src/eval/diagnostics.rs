//! Comparative measurements between trained variants: initial/final score
//! maps on probe pairs and fit-versus-generalization curves.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::net::{NetConfig, ScoreMap};
use crate::params::Params;
use crate::training::{Example, LogRow, Variant};
use crate::update::generate_template;

/// Shannon entropy (nats) of the softmax over all cells.
pub fn softmax_entropy(map: &ScoreMap) -> f64 {
    let m = map.max();
    let e: Vec<f64> = map.0.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    -e.iter()
        .map(|v| v / z)
        .filter(|p| *p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreMapStats {
    pub variant: Variant,
    pub mean_initial_entropy: f64,
    pub mean_final_entropy: f64,
    /// Mean of `L - L*` over probes.
    pub mean_loss_drop: f64,
    /// `(S, S*)` per probe; not serialized.
    #[serde(skip)]
    pub maps: Vec<(ScoreMap, ScoreMap)>,
}

/// Initial and final score maps of each probe's own pair.
pub fn score_map_diagnostics(params: &Params, net: &NetConfig, variant: Variant, probes: &[Example]) -> Result<ScoreMapStats> {
    let mut maps = Vec::with_capacity(probes.len());
    let (mut ei, mut ef, mut drop) = (0.0, 0.0, 0.0);
    for p in probes {
        let r = generate_template(
            &p.shallow,
            std::slice::from_ref(&p.search),
            std::slice::from_ref(&p.label),
            params,
            net,
            variant.init_mode(),
        )?;
        let s = r.initial_scores.into_iter().next().expect("one region");
        let sf = r.final_scores.into_iter().next().expect("one region");
        ei += softmax_entropy(&s);
        ef += softmax_entropy(&sf);
        drop += r.initial_loss - r.final_loss;
        maps.push((s, sf));
    }
    let n = probes.len().max(1) as f64;
    Ok(ScoreMapStats {
        variant,
        mean_initial_entropy: ei / n,
        mean_final_entropy: ef / n,
        mean_loss_drop: drop / n,
        maps,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OverfitCurves {
    /// `(step, final loss)` per training log row.
    pub train: Vec<(usize, f64)>,
    /// `(step, held-out metric)` per evaluation.
    pub held_out: Vec<(usize, f64)>,
}

pub fn overfit_curves(log: &[LogRow], held_out: &[(usize, f64)]) -> OverfitCurves {
    OverfitCurves {
        train: log.iter().map(|r| (r.step, r.loss_final)).collect(),
        held_out: held_out.to_vec(),
    }
}

/// Trailing mean of `values` over a window of `w` entries.
pub fn running_mean(values: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= w {
            sum -= values[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}
