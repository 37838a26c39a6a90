use gradnet::data::load_sequence;
use gradnet::data::sequence::write_bbox_file;
use gradnet::tracking::Tracker;

use super::{load_checkpoint, require, write_json, Context};
use crate::args::TrackArgs;

pub fn run(ctx: &Context, a: TrackArgs) -> anyhow::Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    require(&a.sequence, "sequence")?;
    let seq = load_sequence(&a.sequence)?;
    let variant = a.variant.unwrap_or(ck.variant);
    let mut cfg = ctx.cfg.track.clone();
    if a.no_update {
        cfg.update_interval = usize::MAX;
    }
    let tracker = Tracker::new(&ck.params, &ck.net, variant, cfg)?;
    let result = tracker.run(&seq)?;
    write_bbox_file(&ctx.output("boxes.txt")?, &result.boxes)?;
    write_json(&ctx.output("events.json")?, serde_json::to_value(&result.events)?)?;
    write_json(&ctx.output("track.json")?, serde_json::to_value(&result)?)?;
    println!(
        "{}: {} frames as {variant}, {} stores, {} updates",
        seq.name,
        result.boxes.len(),
        result.stores().count(),
        result.updates().count()
    );
    Ok(())
}
