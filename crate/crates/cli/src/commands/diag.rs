use gradnet::config::Config;
use gradnet::eval::{overfit_curves, running_mean, score_map_diagnostics, OverfitCurves, ScoreMapStats};
use gradnet::experiment::held_out_examples;
use gradnet::training::diagnostics::{
    gradient_weight_ratio, improvement_rate, lr_grid, one_step_losses, one_step_sgd_baseline, RatioSummary,
};
use gradnet::training::log::read_log;
use gradnet::training::Variant;

use super::{load_checkpoint, require, usage, write_json, Context};
use crate::args::DiagArgs;
use crate::plot;

/// Probe maps drawn per checkpoint.
const MAPS_SHOWN: usize = 4;

struct Measured {
    label: String,
    stats: ScoreMapStats,
    ratio: RatioSummary,
    improvement: f64,
}

fn probe_config(ctx: &Context, probes: usize) -> Config {
    let mut cfg = ctx.cfg.clone();
    let per = cfg.train.pairs.pairs_per_video.max(1);
    cfg.experiment.held_out_videos = probes.div_ceil(per).max(1);
    cfg
}

pub fn run(ctx: &Context, a: DiagArgs) -> anyhow::Result<()> {
    if a.probes == 0 {
        return Err(usage("--probes must be at least 1"));
    }
    if a.held_out.len() > a.train_logs.len() {
        return Err(usage("every --held-out curve needs a matching --train-log"));
    }
    let mut measured = Vec::new();
    let mut sgd = None;
    for (i, path) in a.checkpoints.iter().enumerate() {
        let ck = load_checkpoint(path)?;
        let mut cfg = probe_config(ctx, a.probes);
        cfg.net = ck.net.clone();
        let mut probes = held_out_examples(&cfg, &ck.params)?;
        probes.truncate(a.probes);
        let mode = ck.variant.init_mode();
        let stats = score_map_diagnostics(&ck.params, &ck.net, ck.variant, &probes)?;
        let ratio = gradient_weight_ratio(&ck.params, &ck.net, &probes, mode)?;
        let improvement = improvement_rate(&one_step_losses(&ck.params, &ck.net, &probes, mode)?);
        if i == 0 && a.sgd {
            sgd = Some(sgd_table(&ck, &probes, &a)?);
        }
        measured.push(Measured {
            label: format!("{} ({})", ck.variant, path.display()),
            stats,
            ratio,
            improvement,
        });
    }

    let first = &measured[0];
    let comparisons: Vec<_> = measured[1..]
        .iter()
        .map(|m| {
            serde_json::json!({
                "against": m.label,
                "initial_entropy_difference": m.stats.mean_initial_entropy - first.stats.mean_initial_entropy,
                "final_entropy_difference": m.stats.mean_final_entropy - first.stats.mean_final_entropy,
                "loss_drop_difference": m.stats.mean_loss_drop - first.stats.mean_loss_drop,
                "median_ratio_difference": m.ratio.median - first.ratio.median,
                "improvement_rate_difference": m.improvement - first.improvement,
            })
        })
        .collect();
    let per_checkpoint: Vec<_> = measured
        .iter()
        .map(|m| {
            serde_json::json!({
                "checkpoint": m.label,
                "score_maps": m.stats,
                "gradient_share": m.ratio,
                "improvement_rate": m.improvement,
            })
        })
        .collect();

    let curves = overfit(&a)?;
    write_json(
        &ctx.output("diag.json")?,
        serde_json::json!({
            "probes": a.probes,
            "checkpoints": per_checkpoint,
            "comparisons": comparisons,
            "sgd": sgd,
            "overfit": curves.iter().map(|(v, c)| serde_json::json!({"variant": v, "curves": c})).collect::<Vec<_>>(),
        }),
    )?;

    let grid: Vec<(String, Vec<&gradnet::net::ScoreMap>)> = measured
        .iter()
        .flat_map(|m| {
            let shown = &m.stats.maps[..m.stats.maps.len().min(MAPS_SHOWN)];
            [
                (format!("{} S", m.stats.variant), shown.iter().map(|p| &p.0).collect()),
                (format!("{} S*", m.stats.variant), shown.iter().map(|p| &p.1).collect()),
            ]
        })
        .collect();
    plot::heatmaps(&ctx.output("score_maps.svg")?, "initial and updated score maps", &grid)?;
    let hist: Vec<(String, Vec<usize>)> = measured.iter().map(|m| (m.stats.variant.to_string(), m.ratio.histogram.clone())).collect();
    plot::histograms(&ctx.output("gradient_share.svg")?, "gradient share of the updated feature", &hist)?;
    if !curves.is_empty() {
        let train: Vec<_> = curves
            .iter()
            .map(|(v, c)| {
                let y: Vec<f64> = c.train.iter().map(|p| p.1).collect();
                let smooth = running_mean(&y, 50);
                (v.to_string(), c.train.iter().map(|p| p.0 as f64).zip(smooth).collect())
            })
            .collect();
        plot::lines(&ctx.output("train_loss.svg")?, "training loss after the update", "step", "loss", &train)?;
        let held: Vec<_> = curves
            .iter()
            .filter(|(_, c)| !c.held_out.is_empty())
            .map(|(v, c)| (v.to_string(), c.held_out.iter().map(|p| (p.0 as f64, p.1)).collect()))
            .collect();
        if !held.is_empty() {
            plot::lines(&ctx.output("held_out_loss.svg")?, "held-out loss after the update", "step", "loss", &held)?;
        }
    }

    for m in &measured {
        println!(
            "{}: entropy {:.4} -> {:.4}, loss drop {:.4}, median share {:.4}, improved {:.1}%",
            m.label,
            m.stats.mean_initial_entropy,
            m.stats.mean_final_entropy,
            m.stats.mean_loss_drop,
            m.ratio.median,
            100.0 * m.improvement
        );
    }
    Ok(())
}

fn sgd_table(ck: &gradnet::checkpoint::Checkpoint, probes: &[gradnet::training::Example], a: &DiagArgs) -> anyhow::Result<serde_json::Value> {
    let grid = lr_grid(a.lr_base);
    let mode = ck.variant.init_mode();
    let mut pairs = Vec::new();
    for p in probes {
        let rows = one_step_sgd_baseline(p, &ck.params, &ck.net, &grid, a.sgd_cap)?;
        let (initial, learned) = one_step_losses(&ck.params, &ck.net, std::slice::from_ref(p), mode)?[0];
        for r in &rows {
            let it = r.iterations.map_or("inf".to_string(), |n| n.to_string());
            println!("lr {:>10.3e}: iterations {it:>5}, loss after one {:.4} (learned step {learned:.4})", r.lr, r.loss_after_one);
        }
        pairs.push(serde_json::json!({ "initial_loss": initial, "learned_step_loss": learned, "rows": rows }));
    }
    Ok(serde_json::json!({ "lr_grid": grid, "cap": a.sgd_cap, "pairs": pairs }))
}

fn overfit(a: &DiagArgs) -> anyhow::Result<Vec<(Variant, OverfitCurves)>> {
    let mut out = Vec::new();
    for (i, path) in a.train_logs.iter().enumerate() {
        require(path, "training log")?;
        let (variant, rows) = read_log(path)?;
        let held = match a.held_out.get(i) {
            Some(h) => read_held_out(h)?,
            None => Vec::new(),
        };
        out.push((variant.unwrap_or(Variant::Ours), overfit_curves(&rows, &held)));
    }
    Ok(out)
}

fn read_held_out(path: &std::path::Path) -> anyhow::Result<Vec<(usize, f64)>> {
    require(path, "held-out curve")?;
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (s, v) = l.split_once(',').ok_or_else(|| anyhow::anyhow!("{}: bad line `{l}`", path.display()))?;
            Ok((s.trim().parse()?, v.trim().parse()?))
        })
        .collect()
}
