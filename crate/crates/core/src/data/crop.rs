//! Square crops with mean-color padding and bilinear resampling.

use image::{Rgb, RgbImage};
use ndarray::Array3;

use crate::bbox::BBox;

/// Per-channel mean of a frame.
pub fn mean_color(frame: &RgbImage) -> [f64; 3] {
    let mut acc = [0.0f64; 3];
    for p in frame.pixels() {
        for c in 0..3 {
            acc[c] += p[c] as f64;
        }
    }
    let n = (frame.width() as f64 * frame.height() as f64).max(1.0);
    acc.map(|v| v / n)
}

/// Square crop of side `size` (frame pixels) centered at `center`, resampled
/// to `out_size` x `out_size`.
///
/// Output pixel `j` samples source coordinate `cx - size/2 + (j + 0.5) *
/// size/out_size - 0.5`. Bilinear interpolation treats everything outside
/// the frame as the frame's mean color.
pub fn crop_patch(frame: &RgbImage, center: (f64, f64), size: f64, out_size: usize) -> RgbImage {
    let mean = mean_color(frame);
    crop_patch_with_fill(frame, center, size, out_size, mean)
}

pub fn crop_patch_with_fill(frame: &RgbImage, center: (f64, f64), size: f64, out_size: usize, fill: [f64; 3]) -> RgbImage {
    assert!(size > 0.0, "crop size must be positive");
    let (fw, fh) = (frame.width() as i64, frame.height() as i64);
    let step = size / out_size as f64;
    let x0 = center.0 - size / 2.0 - 0.5;
    let y0 = center.1 - size / 2.0 - 0.5;
    let fetch = |x: i64, y: i64, c: usize| -> f64 {
        if x < 0 || y < 0 || x >= fw || y >= fh {
            fill[c]
        } else {
            frame.get_pixel(x as u32, y as u32)[c] as f64
        }
    };
    let mut out = RgbImage::new(out_size as u32, out_size as u32);
    for i in 0..out_size {
        let sy = y0 + (i as f64 + 0.5) * step;
        let yf = sy.floor();
        let ty = sy - yf;
        let yi = yf as i64;
        for j in 0..out_size {
            let sx = x0 + (j as f64 + 0.5) * step;
            let xf = sx.floor();
            let tx = sx - xf;
            let xi = xf as i64;
            let mut px = [0u8; 3];
            for (c, v) in px.iter_mut().enumerate() {
                let mut acc = fetch(xi, yi, c) * (1.0 - tx) * (1.0 - ty);
                if tx > 0.0 {
                    acc += fetch(xi + 1, yi, c) * tx * (1.0 - ty);
                }
                if ty > 0.0 {
                    acc += fetch(xi, yi + 1, c) * (1.0 - tx) * ty;
                }
                if tx > 0.0 && ty > 0.0 {
                    acc += fetch(xi + 1, yi + 1, c) * tx * ty;
                }
                *v = acc.round().clamp(0.0, 255.0) as u8;
            }
            out.put_pixel(j as u32, i as u32, Rgb(px));
        }
    }
    out
}

/// `3 x H x W` tensor with values in [0, 1].
pub fn patch_tensor(patch: &RgbImage) -> Array3<f64> {
    let (w, h) = patch.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, i, j)| patch.get_pixel(j as u32, i as u32)[c] as f64 / 255.0)
}

/// Target-crop and search-crop sides (frame pixels) for a box: a context
/// margin of half the perimeter, square-rooted area, and the search crop
/// at the same pixel scale as the target crop.
pub fn crop_sides(bbox: &BBox, z_size: usize, x_size: usize) -> (f64, f64) {
    let ctx = 0.5 * (bbox.w + bbox.h);
    let s_z = ((bbox.w + ctx) * (bbox.h + ctx)).sqrt();
    let s_x = s_z * x_size as f64 / z_size as f64;
    (s_z, s_x)
}
