use std::path::PathBuf;

use gradnet::checkpoint::Checkpoint;
use gradnet::data::Sequence;
use gradnet::eval::{run_ablation, summarize_auc, AblationEntry, AblationTable, SeedSummary};
use gradnet::experiment::run_seeds;
use gradnet::training::Variant;

use super::{load_checkpoint, sequences, usage, write_json, write_text, Context};
use crate::args::{parse_variant, AblateArgs};
use crate::plot;

struct Loaded {
    label: String,
    variant: Variant,
    ck: Checkpoint,
}

fn load_entry(arg: &str) -> anyhow::Result<Loaded> {
    let (label, path) = match arg.split_once('=') {
        Some((l, p)) if !l.is_empty() => (Some(l.to_string()), PathBuf::from(p)),
        _ => (None, PathBuf::from(arg)),
    };
    let ck = load_checkpoint(&path)?;
    let variant = label.as_deref().and_then(|l| parse_variant(l).ok()).unwrap_or(ck.variant);
    Ok(Loaded {
        label: label.unwrap_or_else(|| ck.variant.to_string()),
        variant,
        ck,
    })
}

pub fn run(ctx: &Context, a: AblateArgs) -> anyhow::Result<()> {
    let seqs = sequences(&ctx.cfg, a.sequences.as_deref())?;
    if a.checkpoints.is_empty() {
        return run_protocol(ctx, &a, &seqs);
    }
    let loaded = a.checkpoints.iter().map(|s| load_entry(s)).collect::<anyhow::Result<Vec<_>>>()?;
    let net = &loaded[0].ck.net;
    if let Some(other) = loaded.iter().find(|l| &l.ck.net != net) {
        return Err(usage(format!("checkpoint `{}` has a different network configuration", other.label)));
    }
    let mut entries: Vec<AblationEntry> = loaded
        .iter()
        .map(|l| AblationEntry {
            label: l.label.clone(),
            variant: l.variant,
            params: Some(&l.ck.params),
        })
        .collect();
    if !entries.iter().any(|e| e.variant == Variant::Baseline) {
        entries.push(AblationEntry {
            label: Variant::Baseline.to_string(),
            variant: Variant::Baseline,
            params: Some(&loaded[0].ck.params),
        });
    }
    let table = run_ablation(&entries, net, &ctx.cfg.track, &seqs, ctx.workers())?;
    write_table(ctx, &table, "ablation")?;
    print!("{}", table.to_markdown());
    Ok(())
}

fn run_protocol(ctx: &Context, a: &AblateArgs, seqs: &[Sequence]) -> anyhow::Result<()> {
    let mut cfg = ctx.cfg.clone();
    if let Some(s) = &a.seeds {
        cfg.experiment.seeds = s.clone();
    } else if let Some(s) = ctx.seed {
        cfg.experiment.seeds = vec![s];
    }
    if cfg.experiment.seeds.is_empty() {
        return Err(usage("no seeds to run"));
    }
    let variants = a.variants.clone().unwrap_or_else(|| cfg.experiment.variants.clone());
    let runs = run_seeds(&cfg, &variants, seqs)?;
    let mut tables = Vec::with_capacity(runs.len());
    for (run, table) in runs {
        let dir = format!("seed_{}", run.seed);
        std::fs::create_dir_all(ctx.out.join(&dir))?;
        for (v, params) in &run.params {
            Checkpoint {
                params: params.clone(),
                net: cfg.net.clone(),
                train: gradnet::training::TrainConfig {
                    variant: *v,
                    seed: run.seed,
                    ..cfg.train.clone()
                },
                variant: *v,
                step: run.logs.get(v).map_or(0, Vec::len),
                seed: run.seed,
            }
            .save(&ctx.out.join(&dir).join(format!("{v}.gnck")))?;
        }
        write_table(ctx, &table, &format!("{dir}/ablation"))?;
        tables.push(table);
    }
    let overall = summarize_auc(&tables, None);
    let heavy = summarize_auc(&tables, Some("drift_heavy"));
    let md = format!(
        "Success AUC over seeds {:?}\n\n{}\nDrift-heavy subset\n\n{}",
        cfg.experiment.seeds,
        summary_markdown(&overall),
        summary_markdown(&heavy)
    );
    write_text(&ctx.output("summary.md")?, &md)?;
    write_json(
        &ctx.output("summary.json")?,
        serde_json::json!({ "seeds": cfg.experiment.seeds, "overall": overall, "drift_heavy": heavy }),
    )?;
    print!("{md}");
    Ok(())
}

fn summary_markdown(rows: &[SeedSummary]) -> String {
    let mut out = String::from("| variant | mean AUC | std | per seed |\n|---|---|---|---|\n");
    for r in rows {
        let per: Vec<String> = r.values.iter().map(|v| format!("{v:.3}")).collect();
        out.push_str(&format!("| {} | {:.3} | {:.3} | {} |\n", r.label, r.mean, r.std, per.join(" ")));
    }
    out
}

fn write_table(ctx: &Context, table: &AblationTable, stem: &str) -> anyhow::Result<()> {
    write_text(&ctx.output(&format!("{stem}.csv"))?, &table.to_csv())?;
    write_text(&ctx.output(&format!("{stem}.md"))?, &table.to_markdown())?;
    write_json(&ctx.output(&format!("{stem}.json"))?, serde_json::to_value(table)?)?;
    let rows: Vec<(String, &gradnet::eval::OpeResult)> = table.rows.iter().map(|r| (r.label.clone(), &r.result)).collect();
    plot::ope_curves_named(ctx, stem, &rows)
}
