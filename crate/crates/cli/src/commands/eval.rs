use std::path::PathBuf;

use gradnet::bbox::BBox;
use gradnet::data::sequence::read_bbox_file;
use gradnet::data::Sequence;
use gradnet::error::Error;
use gradnet::eval::{run_ope, OpeResult, SequenceTracker};
use gradnet::tracking::Tracker;

use super::{load_checkpoint, require, sequences, write_json, write_text, Context};
use crate::args::EvalArgs;
use crate::plot;

/// Replays stored `<sequence>.txt` box files.
struct StoredResults(PathBuf);

impl SequenceTracker for StoredResults {
    fn track(&self, seq: &Sequence) -> (Vec<BBox>, Option<Error>) {
        match read_bbox_file(&self.0.join(format!("{}.txt", seq.name))) {
            Ok(boxes) => (boxes, None),
            Err(e) => (Vec::new(), Some(e)),
        }
    }
}

pub fn run(ctx: &Context, a: EvalArgs) -> anyhow::Result<()> {
    let seqs = sequences(&ctx.cfg, a.sequences.as_deref())?;
    let result = match (&a.results, &a.checkpoint) {
        (Some(dir), _) => {
            require(dir, "results directory")?;
            run_ope(&StoredResults(dir.clone()), &seqs, ctx.workers())
        }
        (None, Some(path)) => {
            let ck = load_checkpoint(path)?;
            let mut cfg = ctx.cfg.track.clone();
            if a.no_update {
                cfg.update_interval = usize::MAX;
            }
            let tracker = Tracker::new(&ck.params, &ck.net, a.variant.unwrap_or(ck.variant), cfg)?;
            run_ope(&tracker, &seqs, ctx.workers())
        }
        (None, None) => unreachable!("clap requires a source"),
    };
    write_report(ctx, &result)?;
    println!(
        "{} sequences, {} frames: precision@20 {:.3}, success AUC {:.3}",
        result.sequences.len(),
        result.total_frames,
        result.precision_at_20,
        result.auc
    );
    Ok(())
}

fn write_report(ctx: &Context, r: &OpeResult) -> anyhow::Result<()> {
    write_json(&ctx.output("ope.json")?, serde_json::to_value(r)?)?;
    let mut csv = String::from("sequence,frames,failed_frames,precision_at_20,success_auc,mean_iou\n");
    for s in &r.sequences {
        csv.push_str(&format!(
            "{},{},{},{:.4},{:.4},{:.4}\n",
            s.name,
            s.frames(),
            s.failed_frames,
            s.precision_at_20,
            s.auc,
            s.mean_iou()
        ));
    }
    write_text(&ctx.output("sequences.csv")?, &csv)?;
    plot::ope_curves(ctx, &[("tracker".to_string(), r)])
}
