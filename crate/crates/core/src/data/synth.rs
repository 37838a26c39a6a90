//! Procedural sequences: a textured target moving over a cluttered static
//! background, optionally with look-alike distractors, scripted occlusions
//! and gradual appearance drift.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::sequence::{Frames, Sequence};
use crate::bbox::BBox;
use crate::error::{Error, Result};

/// Frames `[start, start + len)` hide the target completely.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Occlusion {
    pub start: usize,
    pub len: usize,
}

impl Occlusion {
    pub fn covers(&self, frame: usize) -> bool {
        frame >= self.start && frame < self.start + self.len
    }
}

/// Scenes drifting at least this fast carry the `drift_heavy` attribute.
pub const HEAVY_DRIFT_RATE: f64 = 0.03;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSceneConfig {
    pub name: String,
    pub frame_width: u32,
    pub frame_height: u32,
    pub num_frames: usize,
    pub target_width: u32,
    pub target_height: u32,
    /// Texture cells per side of the target.
    pub texture_cells: u32,
    /// Initial target center; random when absent.
    pub start_center: Option<(f64, f64)>,
    /// Pixels per frame; a random heading with speed up to `max_speed`
    /// when absent.
    pub velocity: Option<(f64, f64)>,
    pub max_speed: f64,
    /// Std of per-frame positional noise, in pixels.
    pub jitter: f64,
    pub distractors: usize,
    /// 1 renders exact clones, 0 unrelated textures.
    pub distractor_similarity: f64,
    pub occlusions: Vec<Occlusion>,
    /// Palette change per frame, in units of whole palettes.
    pub drift_rate: f64,
    /// Number of static background blobs.
    pub clutter: usize,
    pub seed: u64,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        SyntheticSceneConfig {
            name: "synthetic".into(),
            frame_width: 240,
            frame_height: 240,
            num_frames: 60,
            target_width: 32,
            target_height: 32,
            texture_cells: 4,
            start_center: None,
            velocity: None,
            max_speed: 3.0,
            jitter: 0.0,
            distractors: 0,
            distractor_similarity: 0.8,
            occlusions: Vec::new(),
            drift_rate: 0.0,
            clutter: 12,
            seed: 0,
        }
    }
}

impl SyntheticSceneConfig {
    pub fn validate(&self) -> Result<()> {
        let (tw, th) = (self.target_width, self.target_height);
        if tw == 0 || th == 0 || self.texture_cells == 0 {
            return Err(Error::Config("target size and texture cells must be positive".into()));
        }
        if 3 * tw > self.frame_width || 3 * th > self.frame_height {
            return Err(Error::Config(format!(
                "target {tw}x{th} does not fit {}x{} with a one-target margin",
                self.frame_width, self.frame_height
            )));
        }
        if self.num_frames == 0 {
            return Err(Error::Config("num_frames must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.distractor_similarity) {
            return Err(Error::Config("distractor_similarity must lie in [0, 1]".into()));
        }
        if self.drift_rate < 0.0 || !self.drift_rate.is_finite() || self.max_speed < 0.0 || self.jitter < 0.0 {
            return Err(Error::Config("drift_rate, max_speed and jitter must be non-negative".into()));
        }
        if let Some((x, y)) = self.start_center {
            let (lo_x, hi_x) = self.center_range(tw, self.frame_width);
            let (lo_y, hi_y) = self.center_range(th, self.frame_height);
            if x < lo_x || x > hi_x || y < lo_y || y > hi_y {
                return Err(Error::Config(format!("start center ({x}, {y}) leaves the one-target margin")));
            }
        }
        Ok(())
    }

    fn center_range(&self, size: u32, frame: u32) -> (f64, f64) {
        let s = size as f64;
        (1.5 * s, frame as f64 - 1.5 * s)
    }

    pub fn attributes(&self) -> Vec<String> {
        let mut a = Vec::new();
        if self.distractors > 0 {
            a.push("distractors".to_string());
        }
        if !self.occlusions.is_empty() {
            a.push("occlusion".to_string());
        }
        if self.drift_rate > 0.0 {
            a.push("drift".to_string());
        }
        if self.drift_rate >= HEAVY_DRIFT_RATE {
            a.push("drift_heavy".to_string());
        }
        if self.clutter > 0 {
            a.push("clutter".to_string());
        }
        a
    }
}

type Palette = Vec<[f64; 3]>;

fn random_palette(rng: &mut ChaCha8Rng, n: usize) -> Palette {
    (0..n)
        .map(|_| [rng.gen_range(20.0..235.0), rng.gen_range(20.0..235.0), rng.gen_range(20.0..235.0)])
        .collect()
}

fn lerp_palette(a: &Palette, b: &Palette, t: f64) -> Palette {
    a.iter()
        .zip(b)
        .map(|(p, q)| [0, 1, 2].map(|c| p[c] * (1.0 - t) + q[c] * t))
        .collect()
}

struct Mover {
    center: (f64, f64),
    velocity: (f64, f64),
}

impl Mover {
    /// Advances one frame, reflecting off the allowed center range.
    fn step(&mut self, lo: (f64, f64), hi: (f64, f64), noise: (f64, f64)) {
        let axis = |c: &mut f64, v: &mut f64, lo: f64, hi: f64, n: f64| {
            *c += *v + n;
            if *c < lo {
                *c = (2.0 * lo - *c).min(hi);
                *v = v.abs();
            } else if *c > hi {
                *c = (2.0 * hi - *c).max(lo);
                *v = -v.abs();
            }
        };
        axis(&mut self.center.0, &mut self.velocity.0, lo.0, hi.0, noise.0);
        axis(&mut self.center.1, &mut self.velocity.1, lo.1, hi.1, noise.1);
    }
}

/// One rendered frame plus its exact ground truth. `mask[y * width + x]`
/// marks the target's footprint.
#[derive(Clone, Debug)]
pub struct RenderedFrame {
    pub index: usize,
    pub image: RgbImage,
    pub bbox: BBox,
    pub mask: Vec<bool>,
    pub occluded: bool,
}

/// Frame-by-frame renderer; [`generate_sequence`] collects it.
pub struct SceneRenderer {
    cfg: SyntheticSceneConfig,
    rng: ChaCha8Rng,
    background: RgbImage,
    palettes: Vec<Palette>,
    distractor_palettes: Vec<Palette>,
    target: Mover,
    distractors: Vec<Mover>,
    jitter: Option<Normal<f64>>,
    frame: usize,
}

impl SceneRenderer {
    pub fn new(cfg: &SyntheticSceneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (w, h) = (cfg.frame_width, cfg.frame_height);
        let background = render_background(&mut rng, w, h, cfg.clutter);
        let cells = (cfg.texture_cells * cfg.texture_cells) as usize;
        let n_palettes = (cfg.drift_rate * cfg.num_frames as f64).ceil() as usize + 2;
        let palettes: Vec<Palette> = (0..n_palettes).map(|_| random_palette(&mut rng, cells)).collect();
        let distractor_palettes = (0..cfg.distractors)
            .map(|_| {
                let other = random_palette(&mut rng, cells);
                lerp_palette(&palettes[0], &other, 1.0 - cfg.distractor_similarity)
            })
            .collect();
        let (tw, th) = (cfg.target_width, cfg.target_height);
        let (lo_x, hi_x) = cfg.center_range(tw, w);
        let (lo_y, hi_y) = cfg.center_range(th, h);
        let random_velocity = |rng: &mut ChaCha8Rng| {
            let speed = rng.gen::<f64>() * cfg.max_speed;
            let heading = rng.gen::<f64>() * std::f64::consts::TAU;
            (speed * heading.cos(), speed * heading.sin())
        };
        let start = cfg
            .start_center
            .unwrap_or_else(|| (rng.gen_range(lo_x..=hi_x), rng.gen_range(lo_y..=hi_y)));
        let velocity = cfg.velocity.unwrap_or_else(|| random_velocity(&mut rng));
        let target = Mover { center: start, velocity };
        let distractors = (0..cfg.distractors)
            .map(|_| {
                let center = (
                    rng.gen_range(tw as f64 / 2.0..=w as f64 - tw as f64 / 2.0),
                    rng.gen_range(th as f64 / 2.0..=h as f64 - th as f64 / 2.0),
                );
                Mover {
                    center,
                    velocity: random_velocity(&mut rng),
                }
            })
            .collect();
        let jitter = (cfg.jitter > 0.0).then(|| Normal::new(0.0, cfg.jitter).expect("finite jitter"));
        Ok(SceneRenderer {
            cfg: cfg.clone(),
            rng,
            background,
            palettes,
            distractor_palettes,
            target,
            distractors,
            jitter,
            frame: 0,
        })
    }

    fn target_box(&self) -> BBox {
        box_at(self.target.center, self.cfg.target_width, self.cfg.target_height)
    }

    fn target_palette(&self) -> Palette {
        let phase = self.cfg.drift_rate * self.frame as f64;
        let k = phase.floor() as usize;
        lerp_palette(&self.palettes[k], &self.palettes[k + 1], phase - k as f64)
    }

    fn render(&self, with_target: bool) -> (RgbImage, Vec<bool>, bool) {
        let cfg = &self.cfg;
        let mut img = self.background.clone();
        for (m, pal) in self.distractors.iter().zip(&self.distractor_palettes) {
            let b = box_at(m.center, cfg.target_width, cfg.target_height);
            paint_texture(&mut img, &b, cfg.texture_cells, pal, None);
        }
        let mut mask = vec![false; (cfg.frame_width * cfg.frame_height) as usize];
        let b = self.target_box();
        if with_target {
            paint_texture(&mut img, &b, cfg.texture_cells, &self.target_palette(), Some(&mut mask));
        }
        let occluded = cfg.occlusions.iter().any(|o| o.covers(self.frame));
        if occluded {
            let cover = BBox::new(b.x - 4.0, b.y - 4.0, b.w + 8.0, b.h + 8.0);
            fill_rect(&mut img, &cover, Rgb([96, 96, 96]));
        }
        (img, mask, occluded)
    }

    fn advance(&mut self) {
        let cfg = &self.cfg;
        let (tw, th) = (cfg.target_width, cfg.target_height);
        let (lo_x, hi_x) = cfg.center_range(tw, cfg.frame_width);
        let (lo_y, hi_y) = cfg.center_range(th, cfg.frame_height);
        let noise = match &self.jitter {
            Some(n) => (n.sample(&mut self.rng), n.sample(&mut self.rng)),
            None => (0.0, 0.0),
        };
        self.target.step((lo_x, lo_y), (hi_x, hi_y), noise);
        let lo = (tw as f64 / 2.0, th as f64 / 2.0);
        let hi = (cfg.frame_width as f64 - lo.0, cfg.frame_height as f64 - lo.1);
        for d in &mut self.distractors {
            d.step(lo, hi, (0.0, 0.0));
        }
        self.frame += 1;
    }
}

impl Iterator for SceneRenderer {
    type Item = RenderedFrame;

    fn next(&mut self) -> Option<RenderedFrame> {
        if self.frame >= self.cfg.num_frames {
            return None;
        }
        let (image, mask, occluded) = self.render(true);
        let out = RenderedFrame {
            index: self.frame,
            image,
            bbox: self.target_box(),
            mask,
            occluded,
        };
        self.advance();
        Some(out)
    }
}

/// Integer-aligned box of the given size around `center`.
fn box_at(center: (f64, f64), w: u32, h: u32) -> BBox {
    let x = (center.0 - w as f64 / 2.0).round();
    let y = (center.1 - h as f64 / 2.0).round();
    BBox::new(x, y, w as f64, h as f64)
}

fn clip_range(lo: f64, len: f64, limit: u32) -> std::ops::Range<u32> {
    let a = lo.max(0.0) as u32;
    let b = (lo + len).min(limit as f64).max(0.0) as u32;
    a.min(b)..b
}

fn fill_rect(img: &mut RgbImage, b: &BBox, color: Rgb<u8>) {
    let (w, h) = img.dimensions();
    for y in clip_range(b.y, b.h, h) {
        for x in clip_range(b.x, b.w, w) {
            img.put_pixel(x, y, color);
        }
    }
}

fn paint_texture(img: &mut RgbImage, b: &BBox, cells: u32, palette: &Palette, mut mask: Option<&mut Vec<bool>>) {
    let (w, h) = img.dimensions();
    for y in clip_range(b.y, b.h, h) {
        let cy = (((y as f64 - b.y) / b.h * cells as f64) as u32).min(cells - 1);
        for x in clip_range(b.x, b.w, w) {
            let cx = (((x as f64 - b.x) / b.w * cells as f64) as u32).min(cells - 1);
            let c = palette[(cy * cells + cx) as usize];
            img.put_pixel(x, y, Rgb(c.map(|v| v.round().clamp(0.0, 255.0) as u8)));
            if let Some(m) = mask.as_deref_mut() {
                m[(y * w + x) as usize] = true;
            }
        }
    }
}

fn render_background(rng: &mut ChaCha8Rng, w: u32, h: u32, clutter: usize) -> RgbImage {
    let a: [f64; 3] = [0.0; 3].map(|_| rng.gen_range(60.0..200.0));
    let b: [f64; 3] = [0.0; 3].map(|_| rng.gen_range(60.0..200.0));
    let mut img = RgbImage::from_fn(w, h, |x, y| {
        let t = 0.5 * (x as f64 / w as f64 + y as f64 / h as f64);
        Rgb([0, 1, 2].map(|c| (a[c] * (1.0 - t) + b[c] * t).round() as u8))
    });
    for _ in 0..clutter {
        let rx = rng.gen_range(3.0..(w as f64 / 8.0).max(4.0));
        let ry = rng.gen_range(3.0..(h as f64 / 8.0).max(4.0));
        let cx = rng.gen_range(0.0..w as f64);
        let cy = rng.gen_range(0.0..h as f64);
        let color = Rgb([0u8; 3].map(|_| rng.gen_range(0..=255)));
        for y in clip_range(cy - ry, 2.0 * ry + 1.0, h) {
            for x in clip_range(cx - rx, 2.0 * rx + 1.0, w) {
                let (dx, dy) = ((x as f64 - cx) / rx, (y as f64 - cy) / ry);
                if dx * dx + dy * dy <= 1.0 {
                    img.put_pixel(x, y, color);
                }
            }
        }
    }
    img
}

/// Renders a whole sequence into memory.
pub fn generate_sequence(cfg: &SyntheticSceneConfig) -> Result<Sequence> {
    let renderer = SceneRenderer::new(cfg)?;
    let (frames, groundtruth): (Vec<_>, Vec<_>) = renderer.map(|f| (f.image, f.bbox)).unzip();
    Ok(Sequence {
        name: cfg.name.clone(),
        frames: Frames::Memory(frames),
        groundtruth,
        attributes: cfg.attributes(),
    })
}

/// A mixed suite of `n` scenes: every scene has clutter and drift, and
/// distractors and occlusions alternate across the suite.
pub fn scene_suite(base: &SyntheticSceneConfig, n: usize, seed: u64) -> Vec<SyntheticSceneConfig> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut c = base.clone();
            c.name = format!("{}_{i:03}", base.name);
            c.seed = rng.gen();
            let k: f64 = rng.gen_range(0.75..1.25);
            c.target_width = ((base.target_width as f64 * k).round() as u32).clamp(8, c.frame_width / 3);
            c.target_height = ((base.target_height as f64 * k).round() as u32).clamp(8, c.frame_height / 3);
            if i % 2 == 0 {
                c.distractors = c.distractors.max(2);
            }
            if i % 3 == 1 && c.num_frames > 20 {
                let start = rng.gen_range(c.num_frames / 3..c.num_frames / 2);
                c.occlusions = vec![Occlusion { start, len: 4 }];
            }
            c
        })
        .collect()
}

/// An evaluation suite: [`scene_suite`] over `base`, with every other
/// scene drifting at `heavy_drift_rate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub base: SyntheticSceneConfig,
    pub sequences: usize,
    pub heavy_drift_rate: f64,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            base: SyntheticSceneConfig {
                name: "eval".into(),
                drift_rate: 0.01,
                ..Default::default()
            },
            sequences: 20,
            heavy_drift_rate: 0.04,
            seed: 777,
        }
    }
}

impl SuiteConfig {
    pub fn scenes(&self) -> Result<Vec<SyntheticSceneConfig>> {
        self.base.validate()?;
        if !(self.heavy_drift_rate >= 0.0 && self.heavy_drift_rate.is_finite()) {
            return Err(Error::Config("heavy_drift_rate must be finite and non-negative".into()));
        }
        let mut scenes = scene_suite(&self.base, self.sequences, self.seed);
        for c in scenes.iter_mut().skip(1).step_by(2) {
            c.drift_rate = self.heavy_drift_rate;
        }
        Ok(scenes)
    }

    pub fn generate(&self) -> Result<Vec<Sequence>> {
        self.scenes()?.iter().map(generate_sequence).collect()
    }
}
