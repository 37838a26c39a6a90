//! Training pairs: a target patch Z and a larger search region X from two
//! frames of the same video, plus the score-map label for X.

use image::RgbImage;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::crop::{crop_patch, crop_sides};
use super::sequence::Sequence;
use super::synth::{generate_sequence, scene_suite, SyntheticSceneConfig};
use crate::error::{Error, Result};
use crate::net::{Geometry, LabelMap, NetConfig};

/// How positive cells are weighted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LabelKind {
    /// Positives share 0.5 and negatives 0.5, uniformly within each class.
    Balanced,
    /// As `Balanced`, but positive weights fall off as a Gaussian of the
    /// distance to the target cell.
    Gaussian { sigma: f64 },
}

/// ±1 disk label of radius `radius` cells around `target` (row, col).
pub fn make_label(size: (usize, usize), target: (usize, usize), radius: f64, kind: LabelKind) -> Result<LabelMap> {
    if target.0 >= size.0 || target.1 >= size.1 {
        return Err(Error::InvalidArgument(format!(
            "target cell {target:?} outside {}x{} map",
            size.0, size.1
        )));
    }
    if !(radius >= 0.0) {
        return Err(Error::InvalidArgument(format!("label radius must be non-negative, got {radius}")));
    }
    let dist = |i: usize, j: usize| {
        let (di, dj) = (i as f64 - target.0 as f64, j as f64 - target.1 as f64);
        (di * di + dj * dj).sqrt()
    };
    let signs = Array2::from_shape_fn(size, |(i, j)| if dist(i, j) <= radius { 1.0 } else { -1.0 });
    let raw = Array2::from_shape_fn(size, |(i, j)| match kind {
        LabelKind::Gaussian { sigma } if signs[[i, j]] > 0.0 => (-dist(i, j).powi(2) / (2.0 * sigma * sigma)).exp(),
        _ => 1.0,
    });
    let pos_sum: f64 = raw.iter().zip(&signs).filter(|(_, s)| **s > 0.0).map(|(r, _)| r).sum();
    let neg_sum: f64 = raw.iter().zip(&signs).filter(|(_, s)| **s < 0.0).map(|(r, _)| r).sum();
    let (pos_share, neg_share) = if neg_sum == 0.0 { (1.0, 0.0) } else { (0.5, 0.5) };
    let mut weights = raw;
    ndarray::Zip::from(&mut weights).and(&signs).for_each(|w, &s| {
        *w *= if s > 0.0 { pos_share / pos_sum } else { neg_share / neg_sum };
    });
    Ok(LabelMap { signs, weights })
}

#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub video: usize,
    pub z_frame: usize,
    pub x_frame: usize,
    pub z: RgbImage,
    pub x: RgbImage,
    pub label: LabelMap,
    /// Score-map cell holding the target center in X.
    pub target_cell: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairConfig {
    pub pairs_per_video: usize,
    pub max_frame_gap: usize,
    /// Largest random offset of the target from the X center, in cells.
    pub max_shift: usize,
    pub label_radius: f64,
    pub label_kind: LabelKind,
}

impl Default for PairConfig {
    fn default() -> Self {
        PairConfig {
            pairs_per_video: 8,
            max_frame_gap: 20,
            max_shift: 2,
            label_radius: 2.0,
            label_kind: LabelKind::Balanced,
        }
    }
}

/// Cuts pairs from every sequence with at least two frames.
///
/// Each pair takes Z from frame `a` and X from frame `b` with
/// `0 < |a - b| <= max_frame_gap`. X is centered so that the target lands
/// a random whole number of cells (up to `max_shift`) away from the map
/// center; the label follows it.
pub fn build_training_set<R: Rng>(sequences: &[Sequence], pairs: &PairConfig, net: &NetConfig, rng: &mut R) -> Result<Vec<TrainingPair>> {
    check_pair_config(pairs, &net.geometry()?)?;
    let mut out = Vec::new();
    for (video, seq) in sequences.iter().enumerate() {
        out.extend(pairs_from_sequence(seq, video, pairs, net, rng)?);
    }
    Ok(out)
}

fn check_pair_config(pairs: &PairConfig, geo: &Geometry) -> Result<()> {
    if pairs.max_frame_gap == 0 {
        return Err(Error::InvalidArgument("max_frame_gap must be at least 1 so Z and X come from different frames".into()));
    }
    let [sh, sw] = geo.score;
    if pairs.max_shift > (sh / 2).min(sw / 2) {
        return Err(Error::InvalidArgument(format!(
            "max_shift {} exceeds the {}x{} score map",
            pairs.max_shift, sh, sw
        )));
    }
    Ok(())
}

/// Pairs from one sequence, tagged with `video`. Sequences shorter than two
/// frames yield nothing.
pub fn pairs_from_sequence<R: Rng>(seq: &Sequence, video: usize, pairs: &PairConfig, net: &NetConfig, rng: &mut R) -> Result<Vec<TrainingPair>> {
    let geo = net.geometry()?;
    check_pair_config(pairs, &geo)?;
    let n = seq.len();
    if n < 2 {
        log::warn!("skipping {}: needs at least two frames, has {n}", seq.name);
        return Ok(Vec::new());
    }
    let gap = pairs.max_frame_gap.min(n - 1);
    let mut out = Vec::with_capacity(pairs.pairs_per_video);
    for _ in 0..pairs.pairs_per_video {
        let a = rng.gen_range(0..n);
        let b = loop {
            let d = rng.gen_range(1..=gap) as isize;
            let b = if rng.gen::<bool>() { a as isize + d } else { a as isize - d };
            if (0..n as isize).contains(&b) {
                break b as usize;
            }
        };
        let m = pairs.max_shift as isize;
        let shift = (rng.gen_range(-m..=m), rng.gen_range(-m..=m));
        out.push(cut_pair(seq, video, a, b, shift, pairs, net, &geo)?);
    }
    Ok(out)
}

/// Renders `videos` scenes varied from `base` one at a time and cuts pairs
/// from each, so only one video is held in memory.
pub fn synthetic_pairs(base: &SyntheticSceneConfig, videos: usize, pairs: &PairConfig, net: &NetConfig, seed: u64) -> Result<Vec<TrainingPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(videos * pairs.pairs_per_video);
    for (video, scene) in scene_suite(base, videos, seed).iter().enumerate() {
        let seq = generate_sequence(scene)?;
        out.extend(pairs_from_sequence(&seq, video, pairs, net, &mut rng)?);
    }
    Ok(out)
}

/// One pair with the target `shift` (rows, cols) cells off the X center.
#[allow(clippy::too_many_arguments)]
pub fn cut_pair(
    seq: &Sequence,
    video: usize,
    z_frame: usize,
    x_frame: usize,
    shift: (isize, isize),
    pairs: &PairConfig,
    net: &NetConfig,
    geo: &Geometry,
) -> Result<TrainingPair> {
    let [sh, sw] = geo.score;
    let target_cell = ((sh / 2) as isize + shift.0, (sw / 2) as isize + shift.1);
    if target_cell.0 < 0 || target_cell.1 < 0 {
        return Err(Error::InvalidArgument(format!("shift {shift:?} leaves the score map")));
    }
    let target_cell = (target_cell.0 as usize, target_cell.1 as usize);
    let label = make_label((sh, sw), target_cell, pairs.label_radius, pairs.label_kind)?;

    let zb = seq.groundtruth[z_frame];
    let (s_z, _) = crop_sides(&zb, net.z_size, net.x_size);
    let z = crop_patch(&*seq.frame(z_frame)?, zb.center(), s_z, net.z_size);

    let xb = seq.groundtruth[x_frame];
    let (_, s_x) = crop_sides(&xb, net.z_size, net.x_size);
    let px = s_x / net.x_size as f64 * geo.total_stride as f64;
    let (cx, cy) = xb.center();
    let x_center = (cx - shift.1 as f64 * px, cy - shift.0 as f64 * px);
    let x = crop_patch(&*seq.frame(x_frame)?, x_center, s_x, net.x_size);

    Ok(TrainingPair {
        video,
        z_frame,
        x_frame,
        z,
        x,
        label,
        target_cell,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn positives(l: &LabelMap) -> usize {
        l.signs.iter().filter(|s| **s > 0.0).count()
    }

    #[test]
    fn radius_zero_marks_one_cell() {
        let l = make_label((17, 17), (8, 8), 0.0, LabelKind::Balanced).unwrap();
        assert_eq!(positives(&l), 1);
        assert_eq!(l.signs[[8, 8]], 1.0);
    }

    #[test]
    fn radius_two_marks_thirteen_cells() {
        // Offsets with di^2 + dj^2 <= 4: the centre, 4 at distance 1,
        // 4 diagonals at sqrt(2) and 4 at distance 2.
        let l = make_label((17, 17), (8, 8), 2.0, LabelKind::Balanced).unwrap();
        assert_eq!(positives(&l), 13);
    }

    #[test]
    fn huge_radius_marks_everything() {
        let l = make_label((17, 17), (8, 8), 17.0 * 2f64.sqrt(), LabelKind::Balanced).unwrap();
        assert_eq!(positives(&l), 289);
        assert!((l.weights.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weights_are_class_balanced() {
        for kind in [LabelKind::Balanced, LabelKind::Gaussian { sigma: 1.0 }] {
            let l = make_label((9, 9), (3, 5), 2.0, kind).unwrap();
            let pos: f64 = l.weights.iter().zip(&l.signs).filter(|(_, s)| **s > 0.0).map(|(w, _)| w).sum();
            let neg: f64 = l.weights.iter().zip(&l.signs).filter(|(_, s)| **s < 0.0).map(|(w, _)| w).sum();
            assert!((pos - 0.5).abs() < 1e-12 && (neg - 0.5).abs() < 1e-12);
        }
        let g = make_label((9, 9), (4, 4), 2.0, LabelKind::Gaussian { sigma: 1.0 }).unwrap();
        assert!(g.weights[[4, 4]] > g.weights[[4, 6]]);
    }

    #[test]
    fn target_outside_map_is_rejected() {
        assert!(make_label((9, 9), (9, 0), 2.0, LabelKind::Balanced).is_err());
        assert!(make_label((9, 9), (0, 0), -1.0, LabelKind::Balanced).is_err());
    }

    fn videos(n: usize, frames: usize) -> Vec<Sequence> {
        (0..n)
            .map(|i| {
                generate_sequence(&SyntheticSceneConfig {
                    frame_width: 200,
                    frame_height: 200,
                    num_frames: frames,
                    target_width: 24,
                    target_height: 24,
                    seed: i as u64,
                    ..Default::default()
                })
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn ten_videos_five_pairs_each() {
        let seqs = videos(10, 6);
        let cfg = PairConfig {
            pairs_per_video: 5,
            max_frame_gap: 3,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let set = build_training_set(&seqs, &cfg, &NetConfig::desk(), &mut rng).unwrap();
        assert_eq!(set.len(), 50);
        assert_eq!(set.iter().map(|p| p.video).collect::<BTreeSet<_>>().len(), 10);
        for p in &set {
            let gap = p.z_frame.abs_diff(p.x_frame);
            assert!(gap >= 1 && gap <= 3);
            assert!(p.x.width() > p.z.width());
            assert_eq!(p.label.signs[[p.target_cell.0, p.target_cell.1]], 1.0);
        }
    }

    #[test]
    fn zero_gap_is_rejected_and_single_frames_skipped() {
        let cfg = PairConfig {
            max_frame_gap: 0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(build_training_set(&videos(1, 4), &cfg, &NetConfig::desk(), &mut rng).is_err());
        let mut seqs = videos(2, 4);
        seqs.extend(videos(1, 1));
        let set = build_training_set(&seqs, &PairConfig::default(), &NetConfig::desk(), &mut rng).unwrap();
        assert!(set.iter().all(|p| p.video < 2));
    }

    #[test]
    fn shifted_search_crop_moves_target_by_whole_cells() {
        // A 52 px target gives a 104 px context crop, one frame pixel per
        // crop pixel, so shifting is an exact translation.
        let seq = generate_sequence(&SyntheticSceneConfig {
            frame_width: 320,
            frame_height: 320,
            num_frames: 2,
            target_width: 52,
            target_height: 52,
            ..Default::default()
        })
        .unwrap();
        let net = NetConfig::desk();
        let geo = net.geometry().unwrap();
        let cfg = PairConfig::default();
        let centered = cut_pair(&seq, 0, 0, 0, (0, 0), &cfg, &net, &geo).unwrap();
        let shifted = cut_pair(&seq, 0, 0, 0, (1, -1), &cfg, &net, &geo).unwrap();
        assert_eq!(shifted.target_cell, (5, 3));
        let k = geo.total_stride as u32;
        let (w, h) = centered.x.dimensions();
        for y in 0..h - k {
            for x in k..w {
                assert_eq!(centered.x.get_pixel(x, y), shifted.x.get_pixel(x - k, y + k));
            }
        }
    }
}
