//! Properties of crops and the scene generator over random inputs.

use gradnet::data::{crop_patch, generate_sequence, SceneRenderer, SyntheticSceneConfig};
use image::RgbImage;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise_frame(seed: u64, w: u32, h: u32) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::from_fn(w, h, |_, _| image::Rgb([rng.gen(), rng.gen(), rng.gen()]))
}

fn small_scene(seed: u64, distractors: usize, drift: f64) -> SyntheticSceneConfig {
    SyntheticSceneConfig {
        frame_width: 120,
        frame_height: 100,
        num_frames: 6,
        target_width: 18,
        target_height: 14,
        distractors,
        drift_rate: drift,
        jitter: 0.5,
        clutter: 5,
        seed,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Quarter-pixel centers keep every sample coordinate exact.
    #[test]
    fn crops_are_translation_consistent(
        seed in any::<u64>(),
        cx in 0i32..240, cy in 0i32..180, qx in 0i32..4, qy in 0i32..4,
        dx in -6i32..6, dy in -6i32..6,
        out in 8usize..24,
    ) {
        let frame = noise_frame(seed, 60, 45);
        let c = (cx as f64 / 4.0 + qx as f64 / 16.0, cy as f64 / 4.0 + qy as f64 / 16.0);
        let size = out as f64;
        let a = crop_patch(&frame, c, size, out);
        let b = crop_patch(&frame, (c.0 + dx as f64, c.1 + dy as f64), size, out);
        for i in 0..out as i32 {
            for j in 0..out as i32 {
                let (si, sj) = (i + dy, j + dx);
                if (0..out as i32).contains(&si) && (0..out as i32).contains(&sj) {
                    prop_assert_eq!(b.get_pixel(j as u32, i as u32), a.get_pixel(sj as u32, si as u32));
                }
            }
        }
    }

    #[test]
    fn generator_is_seed_deterministic(seed in any::<u64>(), distractors in 0usize..3, drift in 0.0f64..0.05) {
        let cfg = small_scene(seed, distractors, drift);
        let (a, b) = (generate_sequence(&cfg).unwrap(), generate_sequence(&cfg).unwrap());
        prop_assert_eq!(&a.groundtruth, &b.groundtruth);
        for i in 0..a.len() {
            prop_assert!(a.frame(i).unwrap().as_raw() == b.frame(i).unwrap().as_raw());
        }
    }

    #[test]
    fn rendered_masks_recover_the_recorded_box(seed in any::<u64>(), distractors in 0usize..3) {
        let cfg = small_scene(seed, distractors, 0.02);
        for f in SceneRenderer::new(&cfg).unwrap() {
            let w = cfg.frame_width as usize;
            let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
            for (k, _) in f.mask.iter().enumerate().filter(|(_, m)| **m) {
                let (x, y) = (k % w, k / w);
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
            prop_assert_eq!((x0 as f64, y0 as f64), (f.bbox.x, f.bbox.y));
            prop_assert_eq!(((x1 - x0) as f64, (y1 - y0) as f64), (f.bbox.w, f.bbox.h));
        }
    }
}
