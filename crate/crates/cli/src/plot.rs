//! Static SVG figures.

use std::path::Path;

use anyhow::anyhow;
use gradnet::eval::OpeResult;
use gradnet::net::ScoreMap;
use plotters::prelude::*;

use crate::commands::Context;

const SIZE: (u32, u32) = (720, 480);

fn color(i: usize) -> RGBColor {
    let (r, g, b) = Palette99::pick(i).to_rgba().rgb();
    RGBColor(r, g, b)
}

fn err(e: impl std::fmt::Display) -> anyhow::Error {
    anyhow!("plotting failed: {e}")
}

/// One line per series.
pub fn lines(path: &Path, caption: &str, x_desc: &str, y_desc: &str, series: &[(String, Vec<(f64, f64)>)]) -> anyhow::Result<()> {
    let points = series.iter().flat_map(|(_, s)| s.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !(x0 <= x1) {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let pad = |lo: f64, hi: f64| if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
    let ((x0, x1), (y0, y1)) = (pad(x0, x1), pad(y0, y1));

    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(caption, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(err)?;
    chart.configure_mesh().x_desc(x_desc).y_desc(y_desc).draw().map_err(err)?;
    for (i, (name, s)) in series.iter().enumerate() {
        let c = color(i);
        chart
            .draw_series(LineSeries::new(s.iter().copied().filter(|p| p.0.is_finite() && p.1.is_finite()), c.stroke_width(2)))
            .map_err(err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], c.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(err)?;
    root.present().map_err(err)
}

/// `precision.svg` and `success.svg` in the output directory.
pub fn ope_curves(ctx: &Context, rows: &[(String, &OpeResult)]) -> anyhow::Result<()> {
    ope_curves_named(ctx, "", rows)
}

/// As [`ope_curves`], with file names prefixed by `stem_`.
pub fn ope_curves_named(ctx: &Context, stem: &str, rows: &[(String, &OpeResult)]) -> anyhow::Result<()> {
    let prefix = if stem.is_empty() { String::new() } else { format!("{stem}_") };
    let precision: Vec<_> = rows
        .iter()
        .map(|(l, r)| {
            let pts = r.precision.iter().enumerate().map(|(t, v)| (t as f64, *v)).collect();
            (format!("{l} [{:.3}]", r.precision_at_20), pts)
        })
        .collect();
    lines(&ctx.output(&format!("{prefix}precision.svg"))?, "precision", "center error threshold (px)", "precision", &precision)?;
    let thresholds = gradnet::eval::success_thresholds();
    let success: Vec<_> = rows
        .iter()
        .map(|(l, r)| (format!("{l} [{:.3}]", r.auc), thresholds.iter().copied().zip(r.success.iter().copied()).collect()))
        .collect();
    lines(&ctx.output(&format!("{prefix}success.svg"))?, "success", "overlap threshold", "success rate", &success)
}

/// A grid of score maps, one labelled row per entry, each map normalized
/// to its own range.
pub fn heatmaps(path: &Path, caption: &str, rows: &[(String, Vec<&ScoreMap>)]) -> anyhow::Result<()> {
    const CELL: u32 = 120;
    const LABEL: u32 = 110;
    let cols = rows.iter().map(|r| r.1.len()).max().unwrap_or(0).max(1) as u32;
    let height = 40 + CELL * rows.len().max(1) as u32;
    let root = SVGBackend::new(path, (LABEL + CELL * cols, height)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let root = root.titled(caption, ("sans-serif", 18)).map_err(err)?;
    for (r, (label, maps)) in rows.iter().enumerate() {
        let top = r as i32 * CELL as i32;
        root.draw(&Text::new(label.clone(), (6, top + CELL as i32 / 2), ("sans-serif", 14)))
            .map_err(err)?;
        for (c, map) in maps.iter().enumerate() {
            let (h, w) = map.0.dim();
            let (lo, hi) = map.0.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
            let span = if hi > lo { hi - lo } else { 1.0 };
            let left = LABEL as i32 + c as i32 * CELL as i32;
            let px = (CELL as i32 - 8) / w.max(h) as i32;
            for i in 0..h {
                for j in 0..w {
                    let t = (map.0[[i, j]] - lo) / span;
                    let shade = HSLColor(0.66 * (1.0 - t), 0.9, 0.5);
                    let (x, y) = (left + j as i32 * px, top + i as i32 * px);
                    root.draw(&Rectangle::new([(x, y), (x + px, y + px)], shade.filled()))
                        .map_err(err)?;
                }
            }
        }
    }
    root.present().map_err(err)
}

/// Bar outlines of equal-width histograms over [0, 1].
pub fn histograms(path: &Path, caption: &str, series: &[(String, Vec<usize>)]) -> anyhow::Result<()> {
    let pts: Vec<(String, Vec<(f64, f64)>)> = series
        .iter()
        .map(|(name, counts)| {
            let total = counts.iter().sum::<usize>().max(1) as f64;
            let bins = counts.len().max(1) as f64;
            let mut p = Vec::with_capacity(2 * counts.len() + 2);
            p.push((0.0, 0.0));
            for (k, &n) in counts.iter().enumerate() {
                let f = n as f64 / total;
                p.push((k as f64 / bins, f));
                p.push(((k + 1) as f64 / bins, f));
            }
            p.push((1.0, 0.0));
            (name.clone(), p)
        })
        .collect();
    lines(path, caption, "share", "fraction of elements", &pts)
}
