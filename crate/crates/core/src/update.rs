//! The update branch: template head U1, gradient transformer U2, and the
//! two-forward/one-backward template generation pipeline.
//!
//! ```text
//! beta  = U1(f2)                 S_i  = beta  * f_x(X_i)   L  = sum_i l(S_i, Y_i)
//! G     = dL / df2
//! h2    = f2 + U2(G)
//! beta* = U1(h2)                 S*_i = beta* * f_x(X_i)   L* = sum_i l(S*_i, Y_i)
//! ```
//!
//! `G` is a node on the same tape, so differentiating `L*` with respect to
//! U1's parameters includes the terms that flow through `G`.

use ndarray::{Array3, Dimension};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::ConvGeom;
use crate::net::{
    from_dyn2, from_dyn3, loss_on_tape, run_layers, to_dyn3, xcorr, FeatureMap, LabelMap, NetConfig,
    ScoreMap, Template, BACKBONE_LAYERS, SHALLOW_LAYERS,
};
use crate::params::{Bound, Params};

/// How the pipeline turns the initial template into the final one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateMode {
    /// Gradient-guided update. With `share_u1 = false` the second template
    /// embedding uses the independent `u1_star` head.
    Gradient { share_u1: bool },
    /// No update: the final template is the initial one.
    Disabled,
}

impl UpdateMode {
    fn star_prefix(self) -> &'static str {
        match self {
            UpdateMode::Gradient { share_u1: false } => "u1_star",
            _ => "u1",
        }
    }
}

/// Tape handles for every intermediate of one template generation.
#[derive(Clone, Debug)]
pub struct PipelineVars {
    pub shallow: Var,
    pub beta: Var,
    pub initial_scores: Vec<Var>,
    pub initial_loss: Var,
    pub gradient: Var,
    pub updated: Var,
    pub beta_star: Var,
    pub final_scores: Vec<Var>,
    pub final_loss: Var,
}

/// Value-level result of [`generate_template`].
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateGenResult {
    pub initial_template: Template,
    pub initial_scores: Vec<ScoreMap>,
    pub initial_loss: f64,
    pub shallow_gradient: FeatureMap,
    pub updated_feature: FeatureMap,
    pub optimal_template: Template,
    pub final_scores: Vec<ScoreMap>,
    pub final_loss: f64,
}

/// U1: backbone-shaped layers 3-5 under `prefix`.
pub fn embed(tape: &mut Tape, bound: &Bound, cfg: &NetConfig, prefix: &str, feature: Var) -> Result<Var> {
    run_layers(tape, bound, cfg, prefix, SHALLOW_LAYERS..BACKBONE_LAYERS, feature)
}

fn standardize_channels(tape: &mut Tape, g: Var) -> Result<Var> {
    let shape = tape.shape(g).to_vec();
    let (h, w) = (shape[1], shape[2]);
    let inv_n = 1.0 / (h * w) as f64;
    let sum = tape.channel_sum(g)?;
    let mean = tape.scale(sum, inv_n);
    let mean_b = tape.broadcast_channels(mean, h, w)?;
    let centered = tape.sub(g, mean_b)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.channel_sum(sq)?;
    let var = tape.scale(var, inv_n);
    let var = tape.add_const(var, 1e-12);
    let inv_std = tape.powf(var, -0.5);
    let inv_std_b = tape.broadcast_channels(inv_std, h, w)?;
    tape.mul(centered, inv_std_b)
}

/// U2 applied to the (optionally rescaled) shallow gradient.
pub fn transform_gradient(tape: &mut Tape, bound: &Bound, cfg: &NetConfig, g: Var) -> Result<Var> {
    let mut x = if cfg.normalize_gradient {
        standardize_channels(tape, g)?
    } else {
        g
    };
    if cfg.gradient_gain != 1.0 {
        x = tape.scale(x, cfg.gradient_gain);
    }
    let same = ConvGeom::new(1, 1);
    for d in 0..cfg.u2_depth {
        let w = bound.get(&format!("u2.conv{}.weight", d + 1))?;
        let b = bound.get(&format!("u2.conv{}.bias", d + 1))?;
        x = tape.conv2d(x, w, same)?;
        x = tape.add_bias(x, b)?;
        if d + 1 < cfg.u2_depth {
            x = tape.relu(x);
        }
    }
    Ok(x)
}

fn batch_loss(tape: &mut Tape, template: Var, x_feats: &[Var], labels: &[LabelMap]) -> Result<(Vec<Var>, Var)> {
    let mut scores = Vec::with_capacity(x_feats.len());
    let mut total: Option<Var> = None;
    for (&xf, y) in x_feats.iter().zip(labels) {
        let s = xcorr(tape, template, xf)?;
        let l = loss_on_tape(tape, s, y)?;
        scores.push(s);
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    Ok((scores, total.expect("non-empty batch")))
}

fn check_finite(tape: &Tape, v: Var, what: &str) -> Result<()> {
    if let Some((pos, val)) = tape.value(v).indexed_iter().find(|(_, x)| !x.is_finite()) {
        return Err(Error::Numerical(format!("{what}: non-finite value {val} at {:?}", pos.slice())));
    }
    Ok(())
}

/// Records the full template generation on `tape`.
///
/// `shallow` is f2(Z) (or a persisted h2(Z) during online updates). It is
/// re-leafed as a differentiable var when it carries no gradient history.
pub fn pipeline(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &NetConfig,
    mode: UpdateMode,
    shallow: Var,
    x_feats: &[Var],
    labels: &[LabelMap],
) -> Result<PipelineVars> {
    if x_feats.is_empty() || x_feats.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "need a non-empty list of search features and labels of equal length, got {} and {}",
            x_feats.len(),
            labels.len()
        )));
    }
    let shallow = if tape.requires_grad(shallow) {
        shallow
    } else {
        let v = tape.value(shallow).clone();
        tape.var(v)
    };
    let beta = embed(tape, bound, cfg, "u1", shallow)?;
    let (initial_scores, initial_loss) = batch_loss(tape, beta, x_feats, labels)?;
    match mode {
        UpdateMode::Disabled => {
            let zeros = crate::net::zeros_like_shape(tape.shape(shallow));
            let gradient = tape.constant(zeros);
            Ok(PipelineVars {
                shallow,
                beta,
                initial_scores: initial_scores.clone(),
                initial_loss,
                gradient,
                updated: shallow,
                beta_star: beta,
                final_scores: initial_scores,
                final_loss: initial_loss,
            })
        }
        UpdateMode::Gradient { .. } => {
            let gradient = tape.grad(initial_loss, &[shallow])?[0];
            check_finite(tape, gradient, "shallow gradient")?;
            let delta = transform_gradient(tape, bound, cfg, gradient)?;
            let updated = tape.add(shallow, delta)?;
            let beta_star = embed(tape, bound, cfg, mode.star_prefix(), updated)?;
            let (final_scores, final_loss) = batch_loss(tape, beta_star, x_feats, labels)?;
            Ok(PipelineVars {
                shallow,
                beta,
                initial_scores,
                initial_loss,
                gradient,
                updated,
                beta_star,
                final_scores,
                final_loss,
            })
        }
    }
}

fn inference(params: &Params) -> (Tape, Bound) {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, &|_| false);
    (tape, bound)
}

fn feature_consts(tape: &mut Tape, feats: &[FeatureMap]) -> Vec<Var> {
    feats.iter().map(|f| tape.constant(to_dyn3(&f.0))).collect()
}

/// beta = U1(f2(Z)).
pub fn embed_initial(shallow: &FeatureMap, params: &Params, cfg: &NetConfig) -> Result<Template> {
    let (mut tape, bound) = inference(params);
    let f = tape.constant(to_dyn3(&shallow.0));
    let t = embed(&mut tape, &bound, cfg, "u1", f)
        .map_err(|e| Error::Config(format!("template head: {e}")))?;
    Ok(Template(from_dyn3(tape.value(t))))
}

/// dL/df2(Z) for `L = sum_i l(U1(f2) * f_x(X_i), Y_i)`.
pub fn shallow_gradient(shallow: &FeatureMap, params: &Params, cfg: &NetConfig, x_feats: &[FeatureMap], labels: &[LabelMap]) -> Result<FeatureMap> {
    let (mut tape, bound) = inference(params);
    let f = tape.var(to_dyn3(&shallow.0));
    let xs = feature_consts(&mut tape, x_feats);
    if xs.is_empty() || xs.len() != labels.len() {
        return Err(Error::InvalidArgument("search features and labels must be non-empty and of equal length".into()));
    }
    let beta = embed(&mut tape, &bound, cfg, "u1", f)?;
    let (_, loss) = batch_loss(&mut tape, beta, &xs, labels)?;
    let g = tape.grad(loss, &[f])?[0];
    check_finite(&tape, g, "shallow gradient")?;
    Ok(FeatureMap(from_dyn3(tape.value(g))))
}

/// h2 = f2 + U2(G).
pub fn apply_gradient_update(shallow: &FeatureMap, gradient: &FeatureMap, params: &Params, cfg: &NetConfig) -> Result<FeatureMap> {
    if shallow.shape() != gradient.shape() {
        return Err(Error::shape("gradient update", &shallow.shape(), &gradient.shape()));
    }
    let (mut tape, bound) = inference(params);
    let f = tape.constant(to_dyn3(&shallow.0));
    let g = tape.constant(to_dyn3(&gradient.0));
    let d = transform_gradient(&mut tape, &bound, cfg, g)?;
    let h = tape.add(f, d)?;
    Ok(FeatureMap(from_dyn3(tape.value(h))))
}

/// Runs the whole pipeline and returns every intermediate.
pub fn generate_template(
    shallow: &FeatureMap,
    x_feats: &[FeatureMap],
    labels: &[LabelMap],
    params: &Params,
    cfg: &NetConfig,
    mode: UpdateMode,
) -> Result<TemplateGenResult> {
    let (mut tape, bound) = inference(params);
    let f = tape.var(to_dyn3(&shallow.0));
    let xs = feature_consts(&mut tape, x_feats);
    let p = pipeline(&mut tape, &bound, cfg, mode, f, &xs, labels)?;
    let maps = |tape: &Tape, vs: &[Var]| vs.iter().map(|&v| ScoreMap(from_dyn2(tape.value(v)))).collect::<Vec<_>>();
    Ok(TemplateGenResult {
        initial_template: Template(from_dyn3(tape.value(p.beta))),
        initial_scores: maps(&tape, &p.initial_scores),
        initial_loss: tape.scalar(p.initial_loss),
        shallow_gradient: FeatureMap(from_dyn3(tape.value(p.gradient))),
        updated_feature: FeatureMap(from_dyn3(tape.value(p.updated))),
        optimal_template: Template(from_dyn3(tape.value(p.beta_star))),
        final_scores: maps(&tape, &p.final_scores),
        final_loss: tape.scalar(p.final_loss),
    })
}

/// Per-element share of the gradient term in the updated feature,
/// `|U2(G)| / (|f2| + |U2(G)|)`; elements where both vanish count as 0.
pub fn gradient_share(shallow: &FeatureMap, updated: &FeatureMap) -> Array3<f64> {
    let mut out = shallow.0.clone();
    ndarray::Zip::from(&mut out)
        .and(&shallow.0)
        .and(&updated.0)
        .for_each(|o, &f, &h| {
            let d = (h - f).abs();
            let den = f.abs() + d;
            *o = if den > 0.0 { d / den } else { 0.0 };
        });
    out
}

/// Scores of `template` on each search feature.
pub fn score_all(template: &Template, x_feats: &[FeatureMap]) -> Result<Vec<ScoreMap>> {
    x_feats.iter().map(|f| crate::net::cross_correlate(template, f)).collect()
}
