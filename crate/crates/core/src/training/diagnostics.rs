//! Measurements on trained parameters: the gradient's share of the updated
//! feature, per-pair one-step loss changes, and plain gradient descent on
//! the template as a reference for the learned single step.

use serde::{Deserialize, Serialize};

use super::Example;
use crate::autodiff::Tape;
use crate::error::Result;
use crate::net::{loss_on_tape, to_dyn3, xcorr, NetConfig};
use crate::params::Params;
use crate::update::{embed_initial, generate_template, gradient_share, UpdateMode};

/// Loss below which plain descent counts as converged: a tenth of the
/// loss of an all-zero score map.
pub fn convergence_threshold() -> f64 {
    0.1 * std::f64::consts::LN_2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioSummary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    /// Counts over 20 equal bins of [0, 1].
    pub histogram: Vec<usize>,
}

pub const RATIO_BINS: usize = 20;

pub fn summarize_ratios(mut values: Vec<f64>) -> RatioSummary {
    let mut histogram = vec![0usize; RATIO_BINS];
    for &v in &values {
        let b = ((v * RATIO_BINS as f64) as usize).min(RATIO_BINS - 1);
        histogram[b] += 1;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let median = match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => values[n / 2],
        _ => 0.5 * (values[n / 2 - 1] + values[n / 2]),
    };
    let mean = values.iter().sum::<f64>() / n.max(1) as f64;
    RatioSummary {
        count: n,
        mean,
        median,
        histogram,
    }
}

/// Per-element `|U2(G)| / (|f2(Z)| + |U2(G)|)` pooled over probe pairs,
/// each pair updating its own target from its own search region.
pub fn gradient_weight_ratio(params: &Params, net: &NetConfig, probes: &[Example], mode: UpdateMode) -> Result<RatioSummary> {
    let mut values = Vec::new();
    for p in probes {
        let r = generate_template(&p.shallow, std::slice::from_ref(&p.search), std::slice::from_ref(&p.label), params, net, mode)?;
        values.extend(gradient_share(&p.shallow, &r.updated_feature).iter().copied());
    }
    Ok(summarize_ratios(values))
}

/// `(L, L*)` of the single learned step on each probe pair.
pub fn one_step_losses(params: &Params, net: &NetConfig, probes: &[Example], mode: UpdateMode) -> Result<Vec<(f64, f64)>> {
    probes
        .iter()
        .map(|p| {
            let r = generate_template(&p.shallow, std::slice::from_ref(&p.search), std::slice::from_ref(&p.label), params, net, mode)?;
            Ok((r.initial_loss, r.final_loss))
        })
        .collect()
}

/// Fraction of pairs whose loss strictly drops after the learned step.
pub fn improvement_rate(losses: &[(f64, f64)]) -> f64 {
    losses.iter().filter(|(l, ls)| ls < l).count() as f64 / losses.len().max(1) as f64
}

/// Smallest rate of the default plain-descent grid.
pub const DEFAULT_LR_BASE: f64 = 1.0;

/// `base` and four further rates, one per decade.
pub fn lr_grid(base: f64) -> Vec<f64> {
    (0..5).map(|k| base * 10f64.powi(k)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdRow {
    pub lr: f64,
    /// Iterations until the loss fell below the threshold; `None` when it
    /// never did (infinite).
    pub iterations: Option<usize>,
    pub diverged: bool,
    pub loss_after_one: f64,
    pub final_loss: f64,
}

/// Plain gradient descent directly on the initial template of one pair,
/// for each learning rate in `lr_grid`, capped at `cap` iterations.
///
/// A run diverges when its loss becomes non-finite, exceeds ten times the
/// starting loss, or ends unconverged above the starting loss. The last case
/// matters because clamped logits bound the loss.
pub fn one_step_sgd_baseline(pair: &Example, params: &Params, net: &NetConfig, lr_grid: &[f64], cap: usize) -> Result<Vec<SgdRow>> {
    let beta0 = embed_initial(&pair.shallow, params, net)?;
    let threshold = convergence_threshold();
    let loss_and_grad = |beta: &ndarray::Array3<f64>| -> Result<(f64, ndarray::Array3<f64>)> {
        let mut tape = Tape::new();
        let b = tape.var(to_dyn3(beta));
        let f = tape.constant(to_dyn3(&pair.search.0));
        let s = xcorr(&mut tape, b, f)?;
        let l = loss_on_tape(&mut tape, s, &pair.label)?;
        let g = tape.grad(l, &[b])?[0];
        Ok((tape.scalar(l), crate::net::from_dyn3(tape.value(g))))
    };
    let (l0, _) = loss_and_grad(&beta0.0)?;
    let mut rows = Vec::with_capacity(lr_grid.len());
    for &lr in lr_grid {
        let mut beta = beta0.0.clone();
        let mut loss = l0;
        let mut iterations = (loss < threshold).then_some(0);
        let mut diverged = false;
        let mut loss_after_one = l0;
        for it in 1..=cap {
            if iterations.is_some() {
                break;
            }
            let (_, g) = loss_and_grad(&beta)?;
            beta.scaled_add(-lr, &g);
            if !beta.iter().all(|v| v.is_finite()) {
                diverged = true;
                loss = f64::INFINITY;
                break;
            }
            loss = loss_and_grad(&beta)?.0;
            if it == 1 {
                loss_after_one = loss;
            }
            if !loss.is_finite() || loss > 10.0 * l0 {
                diverged = true;
                break;
            }
            if loss < threshold {
                iterations = Some(it);
            }
        }
        if iterations.is_none() && loss > l0 {
            diverged = true;
        }
        rows.push(SgdRow {
            lr,
            iterations,
            diverged,
            loss_after_one,
            final_loss: loss,
        });
    }
    Ok(rows)
}
