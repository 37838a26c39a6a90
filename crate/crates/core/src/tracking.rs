//! Online tracking: first-frame template generation, per-frame search over
//! a small scale pyramid, reliable-sample bookkeeping and the periodic
//! gradient-guided template refresh.

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma, RgbImage};
use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::data::{crop_patch, crop_sides, make_label, patch_tensor, LabelKind, Sequence};
use crate::error::{Error, Result};
use crate::net::{
    cross_correlate, extract_search_features, extract_shallow_features, extract_template, FeatureMap, Geometry, LabelMap,
    NetConfig, ScoreMap, Template,
};
use crate::params::Params;
use crate::training::Variant;
use crate::update::generate_template;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    pub num_scales: usize,
    /// Ratio between neighbouring search scales.
    pub scale_step: f64,
    /// Multiplies the response of every scale except the current one.
    pub scale_penalty: f64,
    /// Weight of the selected scale in the size update.
    pub scale_damping: f64,
    /// Weight of the cosine window in the final response.
    pub window_influence: f64,
    /// Score-map upsampling factor for sub-cell localization.
    pub upsample: usize,
    /// Refresh the template on frames whose 1-based number is a multiple
    /// of this.
    pub update_interval: usize,
    /// A frame's search crop is stored when its peak score exceeds this
    /// fraction of the first-frame peak.
    pub reliability_factor: f64,
    /// Weight of the refreshed template against the first-frame one.
    pub blend_gamma: f64,
    /// Positive radius of online labels, in score cells.
    pub label_radius: f64,
    /// Box sides stay within these multiples of the initial size.
    pub min_size_factor: f64,
    pub max_size_factor: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            num_scales: 3,
            scale_step: 1.0375,
            scale_penalty: 0.9745,
            scale_damping: 0.59,
            window_influence: 0.176,
            upsample: 16,
            update_interval: 5,
            reliability_factor: 0.5,
            blend_gamma: 0.5,
            label_radius: 2.0,
            min_size_factor: 0.2,
            max_size_factor: 5.0,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_scales == 0 || self.upsample == 0 || self.update_interval == 0 {
            return Err(Error::Config("num_scales, upsample and update_interval must be at least 1".into()));
        }
        if !(self.scale_step >= 1.0) || !(0.0..=1.0).contains(&self.scale_damping) || !(0.0..=1.0).contains(&self.scale_penalty) {
            return Err(Error::Config("scale_step must be >= 1, scale_damping and scale_penalty in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.window_influence) || !(0.0..=1.0).contains(&self.blend_gamma) {
            return Err(Error::Config("window_influence and blend_gamma must lie in [0, 1]".into()));
        }
        if !(self.reliability_factor >= 0.0) || !(self.label_radius >= 0.0) {
            return Err(Error::Config("reliability_factor and label_radius must be non-negative".into()));
        }
        if !(self.min_size_factor > 0.0 && self.min_size_factor <= 1.0 && self.max_size_factor >= 1.0) {
            return Err(Error::Config("size factors must satisfy 0 < min <= 1 <= max".into()));
        }
        Ok(())
    }

    /// Search-side multipliers, smallest first; the middle one is 1 for an
    /// odd count.
    pub fn scale_factors(&self) -> Vec<f64> {
        let mid = (self.num_scales as f64 - 1.0) / 2.0;
        (0..self.num_scales)
            .map(|i| self.scale_step.powf(i as f64 - mid))
            .collect()
    }
}

/// `(1 - gamma) * initial + gamma * updated`.
pub fn blend_template(initial: &Template, updated: &Template, gamma: f64) -> Result<Template> {
    if initial.shape() != updated.shape() {
        return Err(Error::shape("template blend", &initial.shape(), &updated.shape()));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("blend weight {gamma} outside [0, 1]")));
    }
    let mut out = initial.0.clone();
    Zip::from(&mut out)
        .and(&updated.0)
        .for_each(|a, &b| *a = (1.0 - gamma) * *a + gamma * b);
    Ok(Template(out))
}

/// Whether the online refresh runs after the frame with 1-based number
/// `frame`.
pub fn is_update_frame(frame: usize, interval: usize) -> bool {
    frame > 0 && frame % interval == 0
}

/// Separable Hann window normalized to unit sum.
pub fn hann_window(n: usize) -> Array2<f64> {
    let h: Vec<f64> = (0..n)
        .map(|i| {
            if n == 1 {
                1.0
            } else {
                0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n as f64 - 1.0)).cos()
            }
        })
        .collect();
    let w = Array2::from_shape_fn((n, n), |(i, j)| h[i] * h[j]);
    let s = w.sum();
    if s > 0.0 {
        w / s
    } else {
        w
    }
}

/// Side of the upsampled map: odd, so it has a center pixel that maps onto
/// the center cell.
pub fn upsampled_len(n: usize, factor: usize) -> usize {
    (n - 1) * factor + 1
}

/// Bicubic (Catmull-Rom) resize to `upsampled_len` per side.
///
/// The resampler clamps float pixels to [0, 1], so values are mapped into
/// [0.25, 0.75] first, leaving room for the kernel's overshoot.
pub fn upsample(map: &Array2<f64>, factor: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    if factor == 1 {
        return map.clone();
    }
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (uh, uw) = (upsampled_len(h, factor), upsampled_len(w, factor));
    // The f32 kernel would turn a flat map into rounding noise.
    if !(hi > lo) {
        return Array2::from_elem((uh, uw), lo);
    }
    let range = hi - lo;
    let img: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([(0.25 + 0.5 * (map[[y as usize, x as usize]] - lo) / range) as f32]));
    let big = imageops::resize(&img, uw as u32, uh as u32, FilterType::CatmullRom);
    Array2::from_shape_fn((uh, uw), |(i, j)| lo + (big.get_pixel(j as u32, i as u32)[0] as f64 - 0.25) * range / 0.5)
}

/// Offset of upsampled pixel `p` from the map center, in score cells. The
/// resampler places output pixel `p` at input coordinate
/// `(p + 0.5) * n / up - 0.5`.
fn cell_offset(p: usize, n: usize, up: usize) -> f64 {
    (p as f64 - (up as f64 - 1.0) / 2.0) * n as f64 / up as f64
}

/// The refreshable target model.
#[derive(Clone, Debug)]
pub struct ReliableSample {
    /// 1-based frame number the sample came from.
    pub frame: usize,
    pub crop: RgbImage,
    pub features: FeatureMap,
    pub label: LabelMap,
}

#[derive(Clone, Debug)]
pub struct TrackerState {
    pub bbox: BBox,
    /// h2(Z1): the base feature of every online refresh. Absent for the
    /// plain siamese baseline.
    pub updated_feature: Option<FeatureMap>,
    pub initial_template: Template,
    pub template: Template,
    pub thre: f64,
    pub sample: Option<ReliableSample>,
    /// 1-based number of the last processed frame.
    pub frame: usize,
    initial_size: (f64, f64),
    frame_size: (f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    /// The frame's search crop became the reliable sample.
    Store,
    /// The template was refreshed from the sample of `sample_frame`.
    Update { sample_frame: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackEvent {
    /// 1-based frame number.
    pub frame: usize,
    pub max_score: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackResult {
    pub boxes: Vec<BBox>,
    pub max_scores: Vec<f64>,
    pub thre: f64,
    pub events: Vec<TrackEvent>,
}

impl TrackResult {
    pub fn updates(&self) -> impl Iterator<Item = &TrackEvent> {
        self.events.iter().filter(|e| matches!(e.kind, EventKind::Update { .. }))
    }

    pub fn stores(&self) -> impl Iterator<Item = &TrackEvent> {
        self.events.iter().filter(|e| e.kind == EventKind::Store)
    }
}

/// Localization of one frame before any state change.
#[derive(Clone, Debug)]
pub struct Localization {
    pub bbox: BBox,
    /// Peak of the raw score map at the selected scale.
    pub max_score: f64,
    pub scale_index: usize,
    pub scores: ScoreMap,
    /// Score cell nearest the located target.
    pub cell: (usize, usize),
    pub crop: RgbImage,
    pub features: FeatureMap,
}

#[derive(Clone, Debug)]
pub struct FrameOutput {
    pub bbox: BBox,
    pub max_score: f64,
    pub stored: bool,
    pub updated: bool,
}

/// A trained checkpoint bound to tracking settings. Read-only; one
/// [`TrackerState`] per sequence.
pub struct Tracker<'a> {
    params: &'a Params,
    net: &'a NetConfig,
    variant: Variant,
    cfg: TrackerConfig,
    geo: Geometry,
    window: Array2<f64>,
}

impl<'a> Tracker<'a> {
    pub fn new(params: &'a Params, net: &'a NetConfig, variant: Variant, cfg: TrackerConfig) -> Result<Self> {
        cfg.validate()?;
        let geo = net.geometry()?;
        let [sh, sw] = geo.score;
        if sh != sw {
            return Err(Error::Config(format!("tracking needs a square score map, got {sh}x{sw}")));
        }
        let window = hann_window(upsampled_len(sh, cfg.upsample));
        Ok(Tracker {
            params,
            net,
            variant,
            cfg,
            geo,
            window,
        })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    fn center_label(&self, cell: (usize, usize)) -> Result<LabelMap> {
        let [h, w] = self.geo.score;
        make_label((h, w), cell, self.cfg.label_radius, LabelKind::Balanced)
    }

    /// Builds the first-frame template from `bbox` (0-based pixels).
    pub fn init(&self, frame: &RgbImage, bbox: BBox) -> Result<TrackerState> {
        let (fw, fh) = (frame.width() as f64, frame.height() as f64);
        if !bbox.is_finite() || bbox.w <= 0.0 || bbox.h <= 0.0 {
            return Err(Error::InvalidArgument(format!("degenerate initial box {bbox:?}")));
        }
        let (cx, cy) = bbox.center();
        if cx < 0.0 || cy < 0.0 || cx > fw || cy > fh {
            return Err(Error::InvalidArgument(format!("initial box {bbox:?} lies outside the {fw}x{fh} frame")));
        }
        let (s_z, s_x) = crop_sides(&bbox, self.net.z_size, self.net.x_size);
        let z = patch_tensor(&crop_patch(frame, (cx, cy), s_z, self.net.z_size));
        let x = patch_tensor(&crop_patch(frame, (cx, cy), s_x, self.net.x_size));
        let x_feat = extract_search_features(&x, self.params, self.net)?;
        let (template, updated_feature, first_scores) = if self.variant.uses_head() {
            let shallow = extract_shallow_features(&z, self.params, self.net)?;
            let [h, w] = self.geo.score;
            let label = self.center_label((h / 2, w / 2))?;
            let r = generate_template(&shallow, &[x_feat], &[label], self.params, self.net, self.variant.init_mode())?;
            (r.optimal_template, Some(r.updated_feature), r.final_scores.into_iter().next().expect("one region"))
        } else {
            let t = extract_template(&z, self.params, self.net)?;
            let s = cross_correlate(&t, &x_feat)?;
            (t, None, s)
        };
        let peak = first_scores.max();
        let thre = if peak > 0.0 {
            peak
        } else {
            log::warn!("first-frame peak score {peak} is not positive; every later frame counts as reliable");
            f64::MIN_POSITIVE
        };
        Ok(TrackerState {
            bbox,
            updated_feature,
            initial_template: template.clone(),
            template,
            thre,
            sample: None,
            frame: 1,
            initial_size: (bbox.w, bbox.h),
            frame_size: (fw, fh),
        })
    }

    /// Finds the target in `frame` with the current template.
    pub fn locate(&self, state: &TrackerState, frame: &RgbImage) -> Result<Localization> {
        let center = state.bbox.center();
        let (_, s_x) = crop_sides(&state.bbox, self.net.z_size, self.net.x_size);
        let factors = self.cfg.scale_factors();
        let mid = factors.len() / 2;
        let mut best: Option<(f64, usize, ScoreMap, Array2<f64>, RgbImage, FeatureMap)> = None;
        for (i, &f) in factors.iter().enumerate() {
            let crop = crop_patch(frame, center, s_x * f, self.net.x_size);
            let feat = extract_search_features(&patch_tensor(&crop), self.params, self.net)?;
            let scores = cross_correlate(&state.template, &feat)?;
            let up = upsample(&scores.0, self.cfg.upsample);
            let mut peak = up.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if i != mid || factors.len() % 2 == 0 {
                peak *= if peak >= 0.0 { self.cfg.scale_penalty } else { 1.0 / self.cfg.scale_penalty.max(f64::MIN_POSITIVE) };
            }
            if !peak.is_finite() {
                return Err(Error::Numerical(format!("non-finite response at scale {i}")));
            }
            if best.as_ref().map_or(true, |b| peak > b.0) {
                best = Some((peak, i, scores, up, crop, feat));
            }
        }
        let (_, scale_index, scores, up, crop, features) = best.expect("at least one scale");
        let f = factors[scale_index];

        let min = up.iter().copied().fold(f64::INFINITY, f64::min);
        let mut resp = up.mapv(|v| v - min);
        let sum = resp.sum();
        if sum > 0.0 {
            resp /= sum;
        }
        let wi = self.cfg.window_influence;
        let resp = resp * (1.0 - wi) + &self.window * wi;
        let (pi, pj) = argmax2(&resp);
        let n = self.geo.score[0];
        let upn = resp.dim().0;
        let (dy, dx) = (cell_offset(pi, n, upn), cell_offset(pj, n, upn));
        let px = self.geo.total_stride as f64 * s_x * f / self.net.x_size as f64;
        let (fw, fh) = state.frame_size;
        let cx = (center.0 + dx * px).clamp(0.0, fw);
        let cy = (center.1 + dy * px).clamp(0.0, fh);

        let d = self.cfg.scale_damping;
        let k = (1.0 - d) + d * f;
        let (iw, ih) = state.initial_size;
        let w = (state.bbox.w * k).clamp(iw * self.cfg.min_size_factor, (iw * self.cfg.max_size_factor).min(fw.max(1.0)));
        let h = (state.bbox.h * k).clamp(ih * self.cfg.min_size_factor, (ih * self.cfg.max_size_factor).min(fh.max(1.0)));

        let mid_cell = (n - 1) as f64 / 2.0;
        let to_cell = |off: f64| (mid_cell + off).round().clamp(0.0, (n - 1) as f64) as usize;
        Ok(Localization {
            bbox: BBox::from_center(cx, cy, w, h),
            max_score: scores.max(),
            scale_index,
            cell: (to_cell(dy), to_cell(dx)),
            scores,
            crop,
            features,
        })
    }

    /// Stores the localized crop as the reliable sample when its peak
    /// clears the threshold. Returns whether it did.
    pub fn select_reliable_sample(&self, state: &mut TrackerState, loc: &Localization) -> Result<bool> {
        if loc.max_score > self.cfg.reliability_factor * state.thre {
            state.sample = Some(ReliableSample {
                frame: state.frame,
                crop: loc.crop.clone(),
                features: loc.features.clone(),
                label: self.center_label(loc.cell)?,
            });
            return Ok(true);
        }
        Ok(false)
    }

    /// Refreshes the template on update frames when a sample is stored:
    /// the update branch re-runs from h2(Z1) on the sample, and the result
    /// is blended with the first-frame template.
    pub fn maybe_update(&self, state: &mut TrackerState) -> Result<Option<usize>> {
        if !self.variant.updates_online() || !is_update_frame(state.frame, self.cfg.update_interval) {
            return Ok(None);
        }
        let (Some(sample), Some(base)) = (&state.sample, &state.updated_feature) else {
            return Ok(None);
        };
        let r = generate_template(
            base,
            std::slice::from_ref(&sample.features),
            std::slice::from_ref(&sample.label),
            self.params,
            self.net,
            self.variant.train_mode(),
        )?;
        state.template = blend_template(&state.initial_template, &r.optimal_template, self.cfg.blend_gamma)?;
        Ok(Some(sample.frame))
    }

    /// Processes the next frame: locate, then sample bookkeeping, then the
    /// periodic refresh.
    pub fn track_frame(&self, state: &mut TrackerState, frame: &RgbImage, events: &mut Vec<TrackEvent>) -> Result<FrameOutput> {
        let loc = self.locate(state, frame)?;
        state.bbox = loc.bbox;
        state.frame += 1;
        let stored = self.select_reliable_sample(state, &loc)?;
        if stored {
            events.push(TrackEvent {
                frame: state.frame,
                max_score: loc.max_score,
                kind: EventKind::Store,
            });
        }
        let updated = self.maybe_update(state)?;
        if let Some(sample_frame) = updated {
            events.push(TrackEvent {
                frame: state.frame,
                max_score: loc.max_score,
                kind: EventKind::Update { sample_frame },
            });
        }
        Ok(FrameOutput {
            bbox: loc.bbox,
            max_score: loc.max_score,
            stored,
            updated: updated.is_some(),
        })
    }

    /// Tracks a whole sequence from its first ground-truth box.
    pub fn run(&self, seq: &Sequence) -> Result<TrackResult> {
        match self.run_lenient(seq) {
            (r, None) => Ok(r),
            (_, Some(e)) => Err(e),
        }
    }

    /// Like [`Tracker::run`], but keeps the frames tracked before a
    /// failure.
    pub fn run_lenient(&self, seq: &Sequence) -> (TrackResult, Option<Error>) {
        let mut result = TrackResult {
            boxes: Vec::with_capacity(seq.len()),
            max_scores: Vec::with_capacity(seq.len()),
            thre: 0.0,
            events: Vec::new(),
        };
        let err = self.run_into(seq, &mut result).err();
        (result, err)
    }

    pub fn run_partial(&self, seq: &Sequence) -> (Vec<BBox>, Option<Error>) {
        let (r, e) = self.run_lenient(seq);
        (r.boxes, e)
    }

    fn run_into(&self, seq: &Sequence, result: &mut TrackResult) -> Result<()> {
        let first = seq
            .groundtruth
            .first()
            .ok_or_else(|| Error::Dataset(format!("sequence {} is empty", seq.name)))?;
        let mut state = self.init(&*seq.frame(0)?, *first)?;
        result.thre = state.thre;
        result.boxes.push(*first);
        result.max_scores.push(state.thre);
        for i in 1..seq.len() {
            let out = self.track_frame(&mut state, &*seq.frame(i)?, &mut result.events)?;
            result.boxes.push(out.bbox);
            result.max_scores.push(out.max_score);
        }
        Ok(())
    }
}

fn argmax2(a: &Array2<f64>) -> (usize, usize) {
    let mut best = (0, 0);
    let mut v = f64::NEG_INFINITY;
    for ((i, j), &x) in a.indexed_iter() {
        if x > v {
            v = x;
            best = (i, j);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: f64) -> Template {
        Template(ndarray::Array3::from_elem((2, 3, 3), v))
    }

    #[test]
    fn blend_endpoints_and_linearity() {
        let a = Template(ndarray::Array3::from_shape_fn((2, 3, 3), |(c, i, j)| (c * 9 + i * 3 + j) as f64 - 4.0));
        let b = Template(a.0.mapv(|v| -v));
        assert_eq!(blend_template(&a, &b, 0.0).unwrap(), a);
        assert_eq!(blend_template(&a, &b, 1.0).unwrap(), b);
        assert!(blend_template(&a, &b, 0.5).unwrap().0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn blend_rejects_mismatch() {
        let other = Template(ndarray::Array3::zeros((2, 3, 4)));
        assert!(blend_template(&t(1.0), &other, 0.5).is_err());
        assert!(blend_template(&t(1.0), &t(2.0), 1.5).is_err());
    }

    #[test]
    fn update_cadence() {
        let frames: Vec<usize> = (1..=23).filter(|&f| is_update_frame(f, 5)).collect();
        assert_eq!(frames, vec![5, 10, 15, 20]);
        assert!(!(2..=4).any(|f| is_update_frame(f, 5)));
    }

    #[test]
    fn hann_window_is_normalized_and_peaks_at_center() {
        let w = hann_window(9);
        assert!((w.sum() - 1.0).abs() < 1e-12);
        assert_eq!(argmax2(&w), (4, 4));
        assert_eq!(w[[0, 3]], 0.0);
    }

    #[test]
    fn upsampling_keeps_the_center_fixed() {
        let n = 9;
        let map = Array2::from_shape_fn((n, n), |(i, j)| -(((i as f64 - 4.0).powi(2) + (j as f64 - 4.0).powi(2)) as f64));
        let up = upsample(&map, 16);
        assert_eq!(up.dim(), (129, 129));
        let (i, j) = argmax2(&up);
        assert_eq!((i, j), (64, 64));
        assert_eq!(cell_offset(i, n, 129), 0.0);
        // One cell off center.
        let shifted = Array2::from_shape_fn((n, n), |(i, j)| -(((i as f64 - 4.0).powi(2) + (j as f64 - 5.0).powi(2)) as f64));
        let (i, j) = argmax2(&upsample(&shifted, 16));
        assert_eq!(i, 64);
        assert!((cell_offset(j, n, 129) - 1.0).abs() < 0.05, "{}", cell_offset(j, n, 129));
        assert_eq!(cell_offset(3, n, n), -1.0);
    }

    #[test]
    fn flat_maps_stay_flat() {
        let up = upsample(&Array2::from_elem((9, 9), -0.3), 16);
        assert!(up.iter().all(|&v| v == -0.3));
    }

    #[test]
    fn scale_factors_are_symmetric() {
        let f = TrackerConfig::default().scale_factors();
        assert_eq!(f.len(), 3);
        assert_eq!(f[1], 1.0);
        assert!((f[0] * f[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            TrackerConfig { num_scales: 0, ..Default::default() },
            TrackerConfig { blend_gamma: 2.0, ..Default::default() },
            TrackerConfig { scale_step: 0.9, ..Default::default() },
            TrackerConfig { min_size_factor: 0.0, ..Default::default() },
        ] {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }
}
