//! Siamese backbone, cross-correlation scoring and the logistic loss.
//!
//! The backbone is a five-layer AlexNet-style stack. The search branch runs
//! all five layers; the target branch stops after the second block, and the
//! remaining three layers are re-instantiated as the template head of the
//! update branch.

use std::ops::Range;
use std::rc::Rc;

use ndarray::{Array2, Array3, ArrayD, Dimension, Ix2, Ix3, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::ConvGeom;
use crate::params::{init_conv, Bound, Params};

/// Number of backbone layers in the shallow target feature.
pub const SHALLOW_LAYERS: usize = 2;
/// Number of backbone layers.
pub const BACKBONE_LAYERS: usize = 5;
/// Logits are clamped to this magnitude inside the loss.
pub const LOGIT_CLAMP: f64 = 50.0;

/// Layer name for backbone layer `i` (0-based).
pub fn layer_name(i: usize) -> String {
    format!("conv{}", i + 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub paper_scale: bool,
    pub channels: Vec<usize>,
    pub kernels: Vec<usize>,
    pub strides: Vec<usize>,
    /// Max-pool kernel after each layer; 0 disables pooling.
    pub pool_kernels: Vec<usize>,
    pub pool_strides: Vec<usize>,
    pub z_size: usize,
    pub x_size: usize,
    /// 1: single 3x3 conv; 2: 3x3 conv, ReLU, 3x3 conv.
    pub u2_depth: usize,
    /// Per-channel standardization of the shallow gradient before U2.
    pub normalize_gradient: bool,
    /// Multiplier applied to the shallow gradient before U2.
    pub gradient_gain: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig::desk()
    }
}

/// Resolved tensor shapes for one configuration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub shallow: [usize; 3],
    pub template: [usize; 3],
    pub search_shallow: [usize; 3],
    pub search: [usize; 3],
    pub score: [usize; 2],
    pub total_stride: usize,
}

impl NetConfig {
    /// Reduced widths and crops for fast CPU experiments.
    pub fn desk() -> Self {
        NetConfig {
            paper_scale: false,
            channels: vec![16, 32, 32, 32, 32],
            kernels: vec![3, 3, 3, 3, 3],
            strides: vec![2, 1, 1, 1, 1],
            pool_kernels: vec![2, 2, 0, 0, 0],
            pool_strides: vec![2, 2, 0, 0, 0],
            z_size: 104,
            x_size: 168,
            u2_depth: 1,
            normalize_gradient: false,
            gradient_gain: 100.0,
        }
    }

    /// Full SiameseFC geometry: 127/255 crops, 6x6 template, 17x17 scores.
    pub fn paper() -> Self {
        NetConfig {
            paper_scale: true,
            channels: vec![96, 256, 384, 384, 256],
            kernels: vec![11, 5, 3, 3, 3],
            strides: vec![2, 1, 1, 1, 1],
            pool_kernels: vec![3, 3, 0, 0, 0],
            pool_strides: vec![2, 2, 0, 0, 0],
            z_size: 127,
            x_size: 255,
            u2_depth: 1,
            normalize_gradient: false,
            gradient_gain: 1.0,
        }
    }

    fn check_lengths(&self) -> Result<()> {
        for (name, v) in [
            ("channels", &self.channels),
            ("kernels", &self.kernels),
            ("strides", &self.strides),
            ("pool_kernels", &self.pool_kernels),
            ("pool_strides", &self.pool_strides),
        ] {
            if v.len() != BACKBONE_LAYERS {
                return Err(Error::Config(format!("`{name}` must list {BACKBONE_LAYERS} layers, got {}", v.len())));
            }
        }
        for i in 0..BACKBONE_LAYERS {
            let name = layer_name(i);
            if self.channels[i] == 0 {
                return Err(Error::Config(format!("layer {name}: channel width must be >= 1")));
            }
            if self.kernels[i] == 0 || self.strides[i] == 0 {
                return Err(Error::Config(format!("layer {name}: kernel and stride must be >= 1")));
            }
            if self.pool_kernels[i] > 0 && self.pool_strides[i] == 0 {
                return Err(Error::Config(format!("layer {name}: pool stride must be >= 1")));
            }
        }
        if !(1..=2).contains(&self.u2_depth) {
            return Err(Error::Config(format!("u2_depth must be 1 or 2, got {}", self.u2_depth)));
        }
        if !self.gradient_gain.is_finite() {
            return Err(Error::Config("gradient_gain must be finite".into()));
        }
        Ok(())
    }

    /// Spatial shape after layers `range`, starting from `size`.
    fn propagate(&self, range: Range<usize>, size: usize) -> Result<usize> {
        let mut s = size;
        for i in range {
            let name = layer_name(i);
            s = ConvGeom::new(self.strides[i], 0)
                .out_len(s, self.kernels[i])
                .ok_or_else(|| Error::Config(format!("layer {name}: kernel {} exceeds input {s}", self.kernels[i])))?;
            if self.pool_kernels[i] > 0 {
                s = ConvGeom::new(self.pool_strides[i], 0)
                    .out_len(s, self.pool_kernels[i])
                    .ok_or_else(|| Error::Config(format!("layer {name}: pool {} exceeds input {s}", self.pool_kernels[i])))?;
            }
        }
        Ok(s)
    }

    pub fn geometry(&self) -> Result<Geometry> {
        self.check_lengths()?;
        let zs = self.propagate(0..SHALLOW_LAYERS, self.z_size)?;
        let zt = self.propagate(SHALLOW_LAYERS..BACKBONE_LAYERS, zs)?;
        let xs = self.propagate(0..SHALLOW_LAYERS, self.x_size)?;
        let xf = self.propagate(SHALLOW_LAYERS..BACKBONE_LAYERS, xs)?;
        if zt >= xf {
            return Err(Error::Config(format!(
                "template size {zt} must be smaller than search feature size {xf}"
            )));
        }
        let total_stride = (0..BACKBONE_LAYERS)
            .map(|i| self.strides[i] * self.pool_strides[i].max(1))
            .product();
        let cs = self.channels[SHALLOW_LAYERS - 1];
        let cf = self.channels[BACKBONE_LAYERS - 1];
        Ok(Geometry {
            shallow: [cs, zs, zs],
            template: [cf, zt, zt],
            search_shallow: [cs, xs, xs],
            search: [cf, xf, xf],
            score: [xf - zt + 1, xf - zt + 1],
            total_stride,
        })
    }

    fn in_channels(&self, i: usize) -> usize {
        if i == 0 {
            3
        } else {
            self.channels[i - 1]
        }
    }

    pub fn shallow_channels(&self) -> usize {
        self.channels[SHALLOW_LAYERS - 1]
    }
}

/// `C x H x W` activations.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(pub Array3<f64>);

/// Cross-correlation kernel, `C x h x w`.
#[derive(Clone, Debug, PartialEq)]
pub struct Template(pub Array3<f64>);

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap(pub Array2<f64>);

/// Signed labels with per-cell loss weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub signs: Array2<f64>,
    pub weights: Array2<f64>,
}

impl FeatureMap {
    pub fn shape(&self) -> [usize; 3] {
        let (c, h, w) = self.0.dim();
        [c, h, w]
    }
}

impl Template {
    pub fn shape(&self) -> [usize; 3] {
        let (c, h, w) = self.0.dim();
        [c, h, w]
    }
}

impl ScoreMap {
    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Row-major position of the first maximum.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = (0, 0);
        let mut best_val = f64::NEG_INFINITY;
        for ((i, j), &v) in self.0.indexed_iter() {
            if v > best_val {
                best_val = v;
                best = (i, j);
            }
        }
        best
    }
}

impl LabelMap {
    pub fn dim(&self) -> (usize, usize) {
        self.signs.dim()
    }

    /// Same signs, weights multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> LabelMap {
        LabelMap {
            signs: self.signs.clone(),
            weights: &self.weights * factor,
        }
    }
}

pub(crate) fn to_dyn3(a: &Array3<f64>) -> ArrayD<f64> {
    a.clone().into_dyn()
}

pub(crate) fn from_dyn3(a: &ArrayD<f64>) -> Array3<f64> {
    a.clone().into_dimensionality::<Ix3>().expect("3-d value")
}

pub(crate) fn from_dyn2(a: &ArrayD<f64>) -> Array2<f64> {
    a.clone().into_dimensionality::<Ix2>().expect("2-d value")
}

/// Fresh parameters for every backbone layer, the U1 head (and its
/// unshared copy when `two_heads`), and U2.
///
/// U1 starts as a copy of backbone layers 3-5 and U2's last layer is zero,
/// so the untrained update branch reproduces plain template matching.
pub fn init_params<R: Rng>(cfg: &NetConfig, rng: &mut R, two_heads: bool) -> Result<Params> {
    cfg.geometry()?;
    let mut p = Params::new();
    for i in 0..BACKBONE_LAYERS {
        // Small last layer keeps the initial scores in the unsaturated range.
        let gain = if i == BACKBONE_LAYERS - 1 { 0.02 } else { 1.0 };
        let (w, b) = init_conv(rng, cfg.channels[i], cfg.in_channels(i), cfg.kernels[i], gain);
        p.insert(format!("backbone.{}.weight", layer_name(i)), w);
        p.insert(format!("backbone.{}.bias", layer_name(i)), b);
    }
    reset_heads(&mut p, cfg, rng, two_heads)?;
    Ok(p)
}

/// Re-initializes U1 (from the backbone) and U2 (zero last layer).
pub fn reset_heads<R: Rng>(p: &mut Params, cfg: &NetConfig, rng: &mut R, two_heads: bool) -> Result<()> {
    let head_layers: Vec<String> = (SHALLOW_LAYERS..BACKBONE_LAYERS).map(layer_name).collect();
    let head_refs: Vec<&str> = head_layers.iter().map(String::as_str).collect();
    p.copy_prefix("backbone", "u1", &head_refs)?;
    if two_heads {
        p.copy_prefix("backbone", "u1_star", &head_refs)?;
    }
    let c = cfg.shallow_channels();
    for d in 0..cfg.u2_depth {
        let name = format!("u2.conv{}", d + 1);
        let (mut w, b) = init_conv(rng, c, c, 3, 1.0);
        if d + 1 == cfg.u2_depth {
            w.fill(0.0);
        }
        p.insert(format!("{name}.weight"), w);
        p.insert(format!("{name}.bias"), b);
    }
    Ok(())
}

/// Runs backbone-shaped layers `range` with parameters under `prefix`.
pub fn run_layers(tape: &mut Tape, bound: &Bound, cfg: &NetConfig, prefix: &str, range: Range<usize>, mut x: Var) -> Result<Var> {
    for i in range {
        let name = layer_name(i);
        let w = bound.get(&format!("{prefix}.{name}.weight"))?;
        let b = bound.get(&format!("{prefix}.{name}.bias"))?;
        let geom = ConvGeom::new(cfg.strides[i], 0);
        x = tape
            .conv2d(x, w, geom)
            .map_err(|e| Error::Config(format!("layer {prefix}.{name}: {e}")))?;
        x = tape.add_bias(x, b)?;
        if i + 1 < BACKBONE_LAYERS {
            x = tape.relu(x);
        }
        if cfg.pool_kernels[i] > 0 {
            x = tape
                .max_pool(x, cfg.pool_kernels[i], cfg.pool_strides[i])
                .map_err(|e| Error::Config(format!("layer {prefix}.{name} pool: {e}")))?;
        }
    }
    Ok(x)
}

fn check_input(tape: &Tape, x: Var, size: usize, what: &str) -> Result<()> {
    let s = tape.shape(x);
    if s != [3, size, size] {
        return Err(Error::shape(what, &[3, size, size], s));
    }
    Ok(())
}

/// f_x: all five backbone layers on a search crop.
pub fn search_features(tape: &mut Tape, bound: &Bound, cfg: &NetConfig, x: Var) -> Result<Var> {
    check_input(tape, x, cfg.x_size, "search crop")?;
    run_layers(tape, bound, cfg, "backbone", 0..BACKBONE_LAYERS, x)
}

/// f_2: the first two backbone blocks on a target crop.
pub fn shallow_features(tape: &mut Tape, bound: &Bound, cfg: &NetConfig, z: Var) -> Result<Var> {
    check_input(tape, z, cfg.z_size, "target crop")?;
    run_layers(tape, bound, cfg, "backbone", 0..SHALLOW_LAYERS, z)
}

/// Plain siamese template f_z: all five backbone layers on a target crop.
pub fn siamese_template(tape: &mut Tape, bound: &Bound, cfg: &NetConfig, z: Var) -> Result<Var> {
    check_input(tape, z, cfg.z_size, "target crop")?;
    run_layers(tape, bound, cfg, "backbone", 0..BACKBONE_LAYERS, z)
}

/// Valid sliding inner product of `template` over `feature`.
pub fn xcorr(tape: &mut Tape, template: Var, feature: Var) -> Result<Var> {
    let ts = tape.shape(template).to_vec();
    let fs = tape.shape(feature).to_vec();
    if ts.len() != 3 || fs.len() != 3 || ts[0] != fs[0] {
        return Err(Error::shape("cross-correlation channels", &ts, &fs));
    }
    if ts[1] > fs[1] || ts[2] > fs[2] {
        return Err(Error::shape("cross-correlation template exceeds feature", &ts, &fs));
    }
    let kernel = tape.reshape(template, &[1, ts[0], ts[1], ts[2]])?;
    let s = tape.conv2d(feature, kernel, ConvGeom::VALID)?;
    let out = [fs[1] - ts[1] + 1, fs[2] - ts[2] + 1];
    tape.reshape(s, &out)
}

/// Weighted logistic loss `sum_ij w_ij log(1 + exp(-s_ij y_ij))`.
pub fn loss_on_tape(tape: &mut Tape, scores: Var, label: &LabelMap) -> Result<Var> {
    let (h, w) = label.dim();
    if tape.shape(scores) != [h, w] {
        return Err(Error::shape("logistic loss", &[h, w], tape.shape(scores)));
    }
    if let Some((pos, _)) = tape.value(scores).indexed_iter().find(|(_, v)| v.is_nan()) {
        return Err(Error::Numerical(format!("NaN score at {:?}", pos.slice())));
    }
    let neg_y = Rc::new(label.signs.mapv(|y| -y).into_dyn());
    let u = tape.mul_const(scores, neg_y)?;
    let u = tape.clamp(u, -LOGIT_CLAMP, LOGIT_CLAMP);
    let sp = tape.softplus(u);
    let weighted = tape.mul_const(sp, Rc::new(label.weights.clone().into_dyn()))?;
    Ok(tape.sum(weighted))
}

fn inference_tape(params: &Params) -> (Tape, Bound) {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, &|_| false);
    (tape, bound)
}

/// f_x(X) for a `3 x X x X` crop normalized to [0, 1].
pub fn extract_search_features(x: &Array3<f64>, params: &Params, cfg: &NetConfig) -> Result<FeatureMap> {
    let (mut tape, bound) = inference_tape(params);
    let xv = tape.constant(to_dyn3(x));
    let f = search_features(&mut tape, &bound, cfg, xv)?;
    Ok(FeatureMap(from_dyn3(tape.value(f))))
}

/// f_2(Z) for a `3 x Z x Z` crop normalized to [0, 1].
pub fn extract_shallow_features(z: &Array3<f64>, params: &Params, cfg: &NetConfig) -> Result<FeatureMap> {
    let (mut tape, bound) = inference_tape(params);
    let zv = tape.constant(to_dyn3(z));
    let f = shallow_features(&mut tape, &bound, cfg, zv)?;
    Ok(FeatureMap(from_dyn3(tape.value(f))))
}

/// Plain siamese template: all five backbone layers on a target crop.
pub fn extract_template(z: &Array3<f64>, params: &Params, cfg: &NetConfig) -> Result<Template> {
    let (mut tape, bound) = inference_tape(params);
    let zv = tape.constant(to_dyn3(z));
    let t = siamese_template(&mut tape, &bound, cfg, zv)?;
    Ok(Template(from_dyn3(tape.value(t))))
}

pub fn cross_correlate(template: &Template, feature: &FeatureMap) -> Result<ScoreMap> {
    let mut tape = Tape::new();
    let t = tape.constant(to_dyn3(&template.0));
    let f = tape.constant(to_dyn3(&feature.0));
    let s = xcorr(&mut tape, t, f)?;
    Ok(ScoreMap(from_dyn2(tape.value(s))))
}

pub fn logistic_loss(scores: &ScoreMap, label: &LabelMap) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(scores.0.clone().into_dyn());
    let l = loss_on_tape(&mut tape, s, label)?;
    Ok(tape.scalar(l))
}

/// Label map with uniform weights summing to one.
pub fn uniform_label(signs: Array2<f64>) -> LabelMap {
    let n = signs.len() as f64;
    let weights = Array2::from_elem(signs.raw_dim(), 1.0 / n);
    LabelMap { signs, weights }
}

pub(crate) fn zeros_like_shape(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn desk_geometry_is_consistent() {
        let g = NetConfig::desk().geometry().unwrap();
        assert_eq!(g.template, [32, 5, 5]);
        assert_eq!(g.score, [9, 9]);
        assert_eq!(g.shallow, [32, 11, 11]);
        assert_eq!(g.total_stride, 8);
    }

    #[test]
    fn paper_geometry_gives_six_by_six_and_seventeen() {
        let g = NetConfig::paper().geometry().unwrap();
        assert_eq!(&g.template[1..], &[6, 6]);
        assert_eq!(g.score, [17, 17]);
        assert_eq!(g.total_stride, 8);
    }

    #[test]
    fn geometry_errors_name_the_layer() {
        let mut cfg = NetConfig::desk();
        cfg.z_size = 40;
        let err = cfg.geometry().unwrap_err().to_string();
        assert!(err.contains("conv"), "{err}");
        let mut cfg = NetConfig::desk();
        cfg.channels[2] = 0;
        assert!(cfg.geometry().unwrap_err().to_string().contains("conv3"));
    }

    #[test]
    fn extractors_shape_and_zero_propagation() {
        let cfg = NetConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = init_params(&cfg, &mut rng, false).unwrap();
        let g = cfg.geometry().unwrap();
        let x = Array::zeros((3, cfg.x_size, cfg.x_size));
        let f = extract_search_features(&x, &p, &cfg).unwrap();
        assert_eq!(f.shape(), g.search);
        assert!(f.0.iter().all(|&v| v == 0.0));
        let z = Array::zeros((3, cfg.z_size, cfg.z_size));
        let f2 = extract_shallow_features(&z, &p, &cfg).unwrap();
        assert_eq!(f2.shape(), g.shallow);
        assert!(f2.0.iter().all(|&v| v == 0.0));
        // Wrong crop size is a shape error.
        assert!(extract_search_features(&z, &p, &cfg).is_err());
        // Non-zero bias breaks zero propagation.
        p.get_mut("backbone.conv1.bias").unwrap().fill(1.0);
        let f2 = extract_shallow_features(&z, &p, &cfg).unwrap();
        assert!(f2.0.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn cross_correlate_identity_and_zero() {
        let feat = FeatureMap(Array::from_shape_fn((1, 4, 5), |(_, i, j)| (i * 5 + j) as f64));
        let one = Template(Array::from_elem((1, 1, 1), 1.0));
        assert_eq!(cross_correlate(&one, &feat).unwrap().0, feat.0.index_axis(ndarray::Axis(0), 0));
        let zero = Template(Array::zeros((1, 2, 2)));
        assert!(cross_correlate(&zero, &feat).unwrap().0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_correlate_rejects_bad_shapes() {
        let feat = FeatureMap(Array::zeros((2, 4, 4)));
        assert!(cross_correlate(&Template(Array::zeros((3, 2, 2))), &feat).is_err());
        assert!(cross_correlate(&Template(Array::zeros((2, 5, 2))), &feat).is_err());
    }

    #[test]
    fn logistic_loss_reference_values() {
        let signs = Array2::from_shape_fn((3, 3), |(i, j)| if i == 1 && j == 1 { 1.0 } else { -1.0 });
        let label = uniform_label(signs.clone());
        let zero = ScoreMap(Array2::zeros((3, 3)));
        assert!((logistic_loss(&zero, &label).unwrap() - 2f64.ln()).abs() < 1e-15);
        let perfect = ScoreMap(signs.mapv(|y| 20.0 * y));
        assert!(logistic_loss(&perfect, &label).unwrap() < 1e-8);
        let mut bad = zero.clone();
        bad.0[[2, 1]] = f64::NAN;
        let err = logistic_loss(&bad, &label).unwrap_err().to_string();
        assert!(err.contains("[2, 1]"), "{err}");
    }

    #[test]
    fn logistic_loss_is_overflow_safe() {
        let label = uniform_label(Array2::from_elem((2, 2), 1.0));
        let s = ScoreMap(Array2::from_elem((2, 2), -1e6));
        let l = logistic_loss(&s, &label).unwrap();
        assert!((l - (50.0 + (-50f64).exp().ln_1p())).abs() < 1e-12);
    }
}
