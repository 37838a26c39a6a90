use gradnet::checkpoint::Checkpoint;
use gradnet::eval::running_mean;
use gradnet::experiment::{held_out_examples, prepare, training_pairs};
use gradnet::training::diagnostics::one_step_losses;
use gradnet::training::{prepare_examples, train_observed, TrainLog};

use super::{load_checkpoint, write_text, Context};
use crate::args::TrainArgs;
use crate::plot;

const SMOOTHING: usize = 50;

pub fn run(ctx: &Context, a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = ctx.cfg.clone();
    let t = &mut cfg.train;
    if let Some(v) = a.variant {
        t.variant = v;
    }
    t.steps = a.steps.unwrap_or(t.steps);
    t.lr = a.lr.unwrap_or(t.lr);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    t.pretrain_steps = a.pretrain_steps.unwrap_or(t.pretrain_steps);
    t.videos = a.videos.unwrap_or(t.videos);
    t.seed = ctx.seed.unwrap_or(t.seed);
    let start = a.pretrained.as_deref().map(load_checkpoint).transpose()?;
    if let Some(ck) = &start {
        cfg.net = ck.net.clone();
    }
    cfg.validate()?;
    let (seed, variant) = (cfg.train.seed, cfg.train.variant);
    write_text(&ctx.output("config.toml")?, &cfg.to_toml_string()?)?;

    let (init, examples) = match start {
        Some(ck) => {
            let examples = prepare_examples(training_pairs(&cfg, seed)?, &ck.params, &cfg.net)?;
            (ck.params, examples)
        }
        None => {
            let mut log = TrainLog::create(&ctx.output("pretrain_log.csv")?, variant)?;
            let p = prepare(&cfg, seed, Some(&mut log))?;
            (p.params, p.examples)
        }
    };

    let every = a.held_out_every;
    let held = if every > 0 { held_out_examples(&cfg, &init)? } else { Vec::new() };
    let mode = variant.train_mode();
    let held_out_loss = |params: &gradnet::params::Params| -> gradnet::error::Result<f64> {
        let l = one_step_losses(params, &cfg.net, &held, mode)?;
        Ok(l.iter().map(|(_, f)| f).sum::<f64>() / l.len().max(1) as f64)
    };
    let mut curve = Vec::new();
    if every > 0 {
        curve.push((0, held_out_loss(&init)?));
    }
    let mut log = TrainLog::create(&ctx.output("train_log.csv")?, variant)?;
    let outcome = train_observed(&cfg.net, &cfg.train, &examples, init, Some(&mut log), &mut |row, params| {
        if every > 0 && (row.step + 1) % every == 0 {
            curve.push((row.step + 1, held_out_loss(params)?));
        }
        Ok(())
    })?;

    let path = ctx.output("checkpoint.gnck")?;
    Checkpoint {
        params: outcome.params,
        net: cfg.net.clone(),
        train: cfg.train.clone(),
        variant,
        step: outcome.steps,
        seed,
    }
    .save(&path)?;
    if every > 0 {
        let mut text = String::from("step,held_out_loss\n");
        for (s, l) in &curve {
            text.push_str(&format!("{s},{l}\n"));
        }
        write_text(&ctx.output("held_out.csv")?, &text)?;
    }
    if !outcome.log.is_empty() {
        let steps: Vec<f64> = outcome.log.iter().map(|r| r.step as f64).collect();
        let smooth = |f: fn(&gradnet::training::LogRow) -> f64| {
            let v: Vec<f64> = outcome.log.iter().map(f).collect();
            steps.iter().copied().zip(running_mean(&v, SMOOTHING)).collect::<Vec<_>>()
        };
        plot::lines(
            &ctx.output("loss.svg")?,
            &format!("{variant} training loss (running mean of {SMOOTHING})"),
            "step",
            "loss per pair",
            &[("initial".into(), smooth(|r| r.loss_initial)), ("after update".into(), smooth(|r| r.loss_final))],
        )?;
    }
    match outcome.log.last() {
        Some(r) => println!("{variant}: {} steps, last loss {:.4} -> {:.4}", outcome.steps, r.loss_initial, r.loss_final),
        None => println!("{variant}: 0 steps"),
    }
    println!("checkpoint: {}", path.display());
    Ok(())
}
