//! Offline training: the siamese pre-train of the backbone, then the update
//! branch trained either on template-generalization batches (one anchor
//! target scored against search regions from other videos) or per pair.

pub mod diagnostics;
pub mod log;
pub mod optim;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use image::RgbImage;
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{patch_tensor, PairConfig, TrainingPair};
use crate::error::{Error, Result};
use crate::net::{
    extract_search_features, extract_shallow_features, from_dyn3, loss_on_tape, reset_heads, search_features,
    shallow_features, siamese_template, to_dyn3, xcorr, FeatureMap, LabelMap, NetConfig, SHALLOW_LAYERS,
    BACKBONE_LAYERS, layer_name,
};
use crate::params::{Bound, Params};
use crate::update::{pipeline, UpdateMode};

pub use log::{LogRow, TrainLog};
pub use optim::Sgd;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "ours")]
    Ours,
    /// Per-pair training instead of template generalization.
    #[serde(rename = "no_M")]
    NoM,
    /// Per-pair training of the template head with no gradient update.
    #[serde(rename = "no_MG")]
    NoMG,
    /// Trained as `Ours`, tracked without template updates.
    #[serde(rename = "no_U")]
    NoU,
    /// Unshared template heads for the initial and the updated template.
    #[serde(rename = "two_U")]
    TwoU,
    /// The pre-trained siamese backbone with a fixed first-frame template.
    #[serde(rename = "baseline")]
    Baseline,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Ours,
        Variant::NoM,
        Variant::NoMG,
        Variant::NoU,
        Variant::TwoU,
        Variant::Baseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ours => "ours",
            Variant::NoM => "no_M",
            Variant::NoMG => "no_MG",
            Variant::NoU => "no_U",
            Variant::TwoU => "two_U",
            Variant::Baseline => "baseline",
        }
    }

    /// Whether training uses template-generalization batches.
    pub fn generalization(self) -> bool {
        matches!(self, Variant::Ours | Variant::NoU | Variant::TwoU)
    }

    pub fn two_heads(self) -> bool {
        self == Variant::TwoU
    }

    /// Template generation used during training.
    pub fn train_mode(self) -> UpdateMode {
        match self {
            Variant::Ours | Variant::NoU | Variant::NoM => UpdateMode::Gradient { share_u1: true },
            Variant::TwoU => UpdateMode::Gradient { share_u1: false },
            Variant::NoMG | Variant::Baseline => UpdateMode::Disabled,
        }
    }

    /// Whether the tracker refreshes the template online.
    pub fn updates_online(self) -> bool {
        matches!(self, Variant::Ours | Variant::NoM | Variant::TwoU)
    }

    /// Template generation for the first frame. `no_U` keeps the learned
    /// first-frame step and only drops the online refresh.
    pub fn init_mode(self) -> UpdateMode {
        match self {
            Variant::NoU => UpdateMode::Gradient { share_u1: true },
            v => v.train_mode(),
        }
    }

    /// Whether the first-frame template comes from the U1 head rather than
    /// the plain backbone.
    pub fn uses_head(self) -> bool {
        self != Variant::Baseline
    }

    pub fn min_batch(self) -> usize {
        if self.generalization() {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub steps: usize,
    pub seed: u64,
    /// Train only the update branch on cached backbone features.
    pub freeze_backbone: bool,
    pub clip_norm: Option<f64>,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
    /// Number of scene videos generated for training.
    pub videos: usize,
    pub pairs: PairConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Ours,
            batch_size: 4,
            lr: 1e-3,
            momentum: 0.9,
            steps: 1500,
            seed: 0,
            freeze_backbone: true,
            clip_norm: Some(10.0),
            pretrain_steps: 600,
            pretrain_lr: 3e-3,
            pretrain_batch: 8,
            videos: 150,
            pairs: PairConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let min = self.variant.min_batch();
        if self.batch_size < min {
            return Err(Error::Config(format!(
                "variant {} needs batch_size >= {min}, got {}",
                self.variant, self.batch_size
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("lr must be finite and non-negative, momentum in [0, 1)".into()));
        }
        if self.pretrain_batch == 0 {
            return Err(Error::Config("pretrain_batch must be at least 1".into()));
        }
        Ok(())
    }
}

/// A training pair with its backbone features cached.
#[derive(Clone, Debug)]
pub struct Example {
    pub video: usize,
    pub z_frame: usize,
    pub x_frame: usize,
    pub label: LabelMap,
    /// f2(Z).
    pub shallow: FeatureMap,
    /// f_x(X).
    pub search: FeatureMap,
    pub z_image: RgbImage,
    pub x_image: RgbImage,
}

impl Example {
    pub fn new(pair: TrainingPair, params: &Params, net: &NetConfig) -> Result<Example> {
        let shallow = extract_shallow_features(&patch_tensor(&pair.z), params, net)?;
        let search = extract_search_features(&patch_tensor(&pair.x), params, net)?;
        Ok(Example {
            video: pair.video,
            z_frame: pair.z_frame,
            x_frame: pair.x_frame,
            label: pair.label,
            shallow,
            search,
            z_image: pair.z,
            x_image: pair.x,
        })
    }

    fn id(&self) -> String {
        format!("video {} frames {}->{}", self.video, self.z_frame, self.x_frame)
    }
}

pub fn prepare_examples(pairs: Vec<TrainingPair>, params: &Params, net: &NetConfig) -> Result<Vec<Example>> {
    pairs.into_iter().map(|p| Example::new(p, params, net)).collect()
}

/// Anything drawn from a known video.
pub trait FromVideo {
    fn video(&self) -> usize;
}

impl FromVideo for Example {
    fn video(&self) -> usize {
        self.video
    }
}

impl FromVideo for TrainingPair {
    fn video(&self) -> usize {
        self.video
    }
}

/// Indices of `k` items from `k` distinct videos, in random order, so the
/// first (anchor) item is uniform over the chosen videos.
pub fn sample_batch<T: FromVideo, R: Rng>(items: &[T], k: usize, rng: &mut R) -> Result<Vec<usize>> {
    let mut by_video: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        by_video.entry(item.video()).or_default().push(i);
    }
    if k == 0 || by_video.len() < k {
        return Err(Error::Dataset(format!(
            "a batch of {k} needs {k} distinct videos, dataset has {}",
            by_video.len()
        )));
    }
    let groups: Vec<&Vec<usize>> = by_video.values().collect();
    let mut batch: Vec<usize> = rand::seq::index::sample(rng, groups.len(), k)
        .into_iter()
        .map(|g| *groups[g].choose(rng).expect("non-empty group"))
        .collect();
    batch.shuffle(rng);
    Ok(batch)
}

/// Losses of one step, summed over the batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss_initial: f64,
    pub loss_final: f64,
    pub grad_norm: f64,
}

fn trainable_filter(cfg: &TrainConfig) -> impl Fn(&str) -> bool {
    let frozen = cfg.freeze_backbone;
    move |name: &str| !(frozen && name.starts_with("backbone."))
}

fn features_on_tape(tape: &mut Tape, bound: &Bound, net: &NetConfig, batch: &[&Example], frozen: bool) -> Result<(Vec<Var>, Vec<Var>)> {
    let mut zs = Vec::with_capacity(batch.len());
    let mut xs = Vec::with_capacity(batch.len());
    for e in batch {
        if frozen {
            zs.push(tape.constant(to_dyn3(&e.shallow.0)));
            xs.push(tape.constant(to_dyn3(&e.search.0)));
        } else {
            let z = tape.constant(to_dyn3(&patch_tensor(&e.z_image)));
            let x = tape.constant(to_dyn3(&patch_tensor(&e.x_image)));
            zs.push(shallow_features(tape, bound, net, z)?);
            xs.push(search_features(tape, bound, net, x)?);
        }
    }
    Ok((zs, xs))
}

/// Records the training objective for `batch`; returns `(L, L*)`.
///
/// Generalization: the first item's target builds one template that is
/// scored on every search region. Per pair: each item builds its own
/// template and is scored only on its own search region.
fn record_objective(
    tape: &mut Tape,
    bound: &Bound,
    net: &NetConfig,
    cfg: &TrainConfig,
    batch: &[&Example],
) -> Result<(Var, Var)> {
    let mode = cfg.variant.train_mode();
    let (zs, xs) = features_on_tape(tape, bound, net, batch, cfg.freeze_backbone)?;
    let labels: Vec<LabelMap> = batch.iter().map(|e| e.label.clone()).collect();
    if cfg.variant.generalization() {
        let p = pipeline(tape, bound, net, mode, zs[0], &xs, &labels)?;
        return Ok((p.initial_loss, p.final_loss));
    }
    let mut total: Option<(Var, Var)> = None;
    for i in 0..batch.len() {
        let p = pipeline(tape, bound, net, mode, zs[i], &xs[i..=i], &labels[i..=i])?;
        total = Some(match total {
            None => (p.initial_loss, p.final_loss),
            Some((a, b)) => (tape.add(a, p.initial_loss)?, tape.add(b, p.final_loss)?),
        });
    }
    total.ok_or_else(|| Error::InvalidArgument("empty batch".into()))
}

/// `(L, L*)` for `batch` without touching the parameters.
pub fn batch_objective(batch: &[&Example], params: &Params, net: &NetConfig, cfg: &TrainConfig) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, &|_| false);
    let (l, ls) = record_objective(&mut tape, &bound, net, cfg, batch)?;
    Ok((tape.scalar(l), tape.scalar(ls)))
}

fn step(batch: &[&Example], params: &mut Params, opt: &mut Sgd, net: &NetConfig, cfg: &TrainConfig) -> Result<StepStats> {
    let mut tape = Tape::new();
    let filter = trainable_filter(cfg);
    let bound = params.bind(&mut tape, &filter);
    let (l, ls) = record_objective(&mut tape, &bound, net, cfg, batch)?;
    let (loss_initial, loss_final) = (tape.scalar(l), tape.scalar(ls));
    if !loss_initial.is_finite() || !loss_final.is_finite() {
        let ids: Vec<String> = batch.iter().map(|e| e.id()).collect();
        return Err(Error::Numerical(format!("non-finite loss on batch [{}]", ids.join("; "))));
    }
    let trainable = bound.trainable(&tape);
    let vars: Vec<Var> = trainable.iter().map(|(_, v)| *v).collect();
    let grads = tape.grad(ls, &vars)?;
    let grads: Vec<_> = trainable
        .iter()
        .zip(grads)
        .map(|((name, _), g)| (name.clone(), tape.value(g).clone()))
        .collect();
    let grad_norm = opt.step(params, &grads).map_err(|e| {
        let ids: Vec<String> = batch.iter().map(|e| e.id()).collect();
        Error::Numerical(format!("{e} on batch [{}]", ids.join("; ")))
    })?;
    Ok(StepStats {
        loss_initial,
        loss_final,
        grad_norm,
    })
}

/// One template-generalization step (variants ours, no_U, two_U).
pub fn generalization_step(batch: &[&Example], params: &mut Params, opt: &mut Sgd, net: &NetConfig, cfg: &TrainConfig) -> Result<StepStats> {
    if !cfg.variant.generalization() {
        return Err(Error::Config(format!("variant {} does not train on generalization batches", cfg.variant)));
    }
    step(batch, params, opt, net, cfg)
}

/// One per-pair step (variants no_M, no_MG).
pub fn basic_step(batch: &[&Example], params: &mut Params, opt: &mut Sgd, net: &NetConfig, cfg: &TrainConfig) -> Result<StepStats> {
    if cfg.variant.generalization() {
        return Err(Error::Config(format!("variant {} trains on generalization batches", cfg.variant)));
    }
    step(batch, params, opt, net, cfg)
}

/// Makes sure `params` holds every head the variant reads. A missing
/// unshared head starts as a copy of the shared one.
pub fn ensure_heads(params: &mut Params, variant: Variant) -> Result<()> {
    if variant.two_heads() && !params.contains("u1_star.conv5.weight") {
        let layers: Vec<String> = (SHALLOW_LAYERS..BACKBONE_LAYERS).map(layer_name).collect();
        let refs: Vec<&str> = layers.iter().map(String::as_str).collect();
        params.copy_prefix("u1", "u1_star", &refs)?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: Params,
    pub steps: usize,
    pub log: Vec<LogRow>,
}

/// Trains the update branch from `params` on `examples`.
///
/// With `log`, every step is appended to it as it completes.
pub fn train(net: &NetConfig, cfg: &TrainConfig, examples: &[Example], params: Params, log: Option<&mut TrainLog>) -> Result<TrainOutcome> {
    train_observed(net, cfg, examples, params, log, &mut |_, _| Ok(()))
}

/// [`train`], calling `observe` with each step's row and the parameters
/// after that step.
pub fn train_observed(
    net: &NetConfig,
    cfg: &TrainConfig,
    examples: &[Example],
    params: Params,
    mut log: Option<&mut TrainLog>,
    observe: &mut dyn FnMut(&LogRow, &Params) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut params = params;
    ensure_heads(&mut params, cfg.variant)?;
    if cfg.variant == Variant::Baseline {
        return Ok(TrainOutcome {
            params,
            steps: 0,
            log: Vec::new(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.clip_norm);
    let start = Instant::now();
    let mut rows = Vec::with_capacity(cfg.steps);
    for s in 0..cfg.steps {
        let idx = sample_batch(examples, cfg.batch_size, &mut rng)?;
        let batch: Vec<&Example> = idx.iter().map(|&i| &examples[i]).collect();
        let stats = step(&batch, &mut params, &mut opt, net, cfg)?;
        let row = LogRow {
            step: s,
            loss_initial: stats.loss_initial / batch.len() as f64,
            loss_final: stats.loss_final / batch.len() as f64,
            lr: cfg.lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        if let Some(l) = log.as_deref_mut() {
            l.append(&row)?;
        }
        observe(&row, &params)?;
        rows.push(row);
    }
    Ok(TrainOutcome {
        params,
        steps: cfg.steps,
        log: rows,
    })
}

fn siamese_pair_loss(tape: &mut Tape, bound: &Bound, net: &NetConfig, z: &Array3<f64>, x: &Array3<f64>, label: &LabelMap) -> Result<Var> {
    let zv = tape.constant(to_dyn3(z));
    let xv = tape.constant(to_dyn3(x));
    let t = siamese_template(tape, bound, net, zv)?;
    let f = search_features(tape, bound, net, xv)?;
    let s = xcorr(tape, t, f)?;
    loss_on_tape(tape, s, label)
}

/// Plain siamese matching pre-train of the backbone on image pairs, then
/// fresh update-branch heads copied from the trained backbone.
pub fn pretrain_backbone(net: &NetConfig, cfg: &TrainConfig, pairs: &[TrainingPair], params: Params, mut log: Option<&mut TrainLog>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Dataset("no training pairs".into()));
    }
    let mut params = params;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba5e);
    let mut opt = Sgd::new(cfg.pretrain_lr, cfg.momentum, cfg.clip_norm);
    let start = Instant::now();
    let mut rows = Vec::with_capacity(cfg.pretrain_steps);
    for s in 0..cfg.pretrain_steps {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, &|n| n.starts_with("backbone."));
        let mut total: Option<Var> = None;
        for _ in 0..cfg.pretrain_batch {
            let p = &pairs[rng.gen_range(0..pairs.len())];
            let l = siamese_pair_loss(&mut tape, &bound, net, &patch_tensor(&p.z), &patch_tensor(&p.x), &p.label)?;
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l)?,
            });
        }
        let total = total.expect("non-empty batch");
        let loss = tape.scalar(total) / cfg.pretrain_batch as f64;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite pre-train loss at step {s}")));
        }
        let trainable = bound.trainable(&tape);
        let vars: Vec<Var> = trainable.iter().map(|(_, v)| *v).collect();
        let grads = tape.grad(total, &vars)?;
        let grads: Vec<_> = trainable
            .iter()
            .zip(grads)
            .map(|((n, _), g)| (n.clone(), tape.value(g).mapv(|v| v / cfg.pretrain_batch as f64)))
            .collect();
        opt.step(&mut params, &grads)?;
        let row = LogRow {
            step: s,
            loss_initial: loss,
            loss_final: loss,
            lr: cfg.pretrain_lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        if let Some(l) = log.as_deref_mut() {
            l.append(&row)?;
        }
        rows.push(row);
    }
    let mut head_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4ead);
    reset_heads(&mut params, net, &mut head_rng, cfg.variant.two_heads())?;
    Ok(TrainOutcome {
        params,
        steps: cfg.pretrain_steps,
        log: rows,
    })
}

/// Mean siamese matching loss of the plain backbone over `pairs`.
pub fn siamese_loss(net: &NetConfig, params: &Params, pairs: &[TrainingPair]) -> Result<f64> {
    let mut sum = 0.0;
    for p in pairs {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, &|_| false);
        let l = siamese_pair_loss(&mut tape, &bound, net, &patch_tensor(&p.z), &patch_tensor(&p.x), &p.label)?;
        sum += tape.scalar(l);
    }
    Ok(sum / pairs.len().max(1) as f64)
}

/// f2 of a patch as a feature map; convenience for callers holding images.
pub fn shallow_of(img: &RgbImage, params: &Params, net: &NetConfig) -> Result<FeatureMap> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, &|_| false);
    let z = tape.constant(to_dyn3(&patch_tensor(img)));
    let f = shallow_features(&mut tape, &bound, net, z)?;
    Ok(FeatureMap(from_dyn3(tape.value(f))))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct V(usize);
    impl FromVideo for V {
        fn video(&self) -> usize {
            self.0
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.name()));
        }
        assert!("w2u".parse::<Variant>().is_err());
    }

    #[test]
    fn generalization_needs_two_pairs() {
        let cfg = TrainConfig {
            batch_size: 1,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            batch_size: 1,
            variant: Variant::NoM,
            ..Default::default()
        };
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn four_videos_give_one_pair_each() {
        let items: Vec<V> = (0..4).flat_map(|v| (0..3).map(move |_| V(v))).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let b = sample_batch(&items, 4, &mut rng).unwrap();
            let mut vids: Vec<usize> = b.iter().map(|&i| items[i].0).collect();
            vids.sort();
            assert_eq!(vids, vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn batches_are_seed_deterministic() {
        let items: Vec<V> = (0..10).flat_map(|v| (0..5).map(move |_| V(v))).collect();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| sample_batch(&items, 4, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
        assert_ne!(draw(3), draw(4));
    }

    #[test]
    fn videos_are_drawn_with_frequency_k_over_n() {
        let items: Vec<V> = (0..10).flat_map(|v| (0..5).map(move |_| V(v))).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut counts = [0usize; 10];
        let mut anchors = [0usize; 10];
        for _ in 0..1000 {
            let b = sample_batch(&items, 4, &mut rng).unwrap();
            anchors[items[b[0]].0] += 1;
            for i in b {
                counts[items[i].0] += 1;
            }
        }
        for c in counts {
            assert!((c as f64 / 1000.0 - 0.4).abs() <= 0.05, "{counts:?}");
        }
        for a in anchors {
            assert!((a as f64 / 1000.0 - 0.1).abs() <= 0.04, "{anchors:?}");
        }
    }

    #[test]
    fn too_few_videos_is_an_error() {
        let items: Vec<V> = (0..3).map(V).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_batch(&items, 4, &mut rng), Err(Error::Dataset(_))));
    }
}
