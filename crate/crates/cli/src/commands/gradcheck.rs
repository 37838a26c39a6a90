use std::time::Instant;

use gradnet::gradcheck::{random_instance, run_gradcheck, second_order_difference, Fault, GradcheckConfig};

use super::{load_checkpoint, usage, write_json, Context};
use crate::args::{FaultArg, GradcheckArgs};

/// Smallest path-difference norm that counts as a live second-order path.
const SECOND_ORDER_FLOOR: f64 = 1e-6;

pub fn run(ctx: &Context, a: GradcheckArgs) -> anyhow::Result<()> {
    if a.instances == 0 || a.samples == 0 {
        return Err(usage("--instances and --samples must be at least 1"));
    }
    let cfg = GradcheckConfig {
        instances: a.instances,
        samples: a.samples,
        tolerance: a.tolerance,
        seed: ctx.seed.unwrap_or(0),
        fault: a.fault.map(|f| match f {
            FaultArg::SignFlip => Fault::SignFlip,
        }),
        ..Default::default()
    };
    let net = &ctx.cfg.net;
    let start = Instant::now();
    let report = run_gradcheck(net, &cfg)?;
    for c in &report.checks {
        println!(
            "{:<42} max rel error {:.2e}  ({} coordinates, {} resampled)  {}",
            c.name,
            c.max_rel_error,
            c.coordinates,
            c.skipped,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    println!("{} instances in {:.1}s", cfg.instances, start.elapsed().as_secs_f64());

    let mut second = None;
    if a.second_order {
        let inst = random_instance(net, cfg.regions, cfg.seed)?;
        let (params, net) = match &a.checkpoint {
            Some(p) => {
                let ck = load_checkpoint(p)?;
                (ck.params, ck.net)
            }
            None => (inst.params.clone(), net.clone()),
        };
        let norm = second_order_difference(&params, &net, &inst.shallow, &inst.search, &inst.labels)?;
        println!("second-order path difference norm {norm:.3e}");
        second = Some(norm);
    }
    write_json(
        &ctx.output("gradcheck.json")?,
        serde_json::json!({ "report": report, "second_order_difference": second }),
    )?;
    if !report.passed() {
        anyhow::bail!("gradient check failed: max relative error {:.2e} above {:.0e}", report.max_rel_error(), cfg.tolerance);
    }
    if second.is_some_and(|n| !(n > SECOND_ORDER_FLOOR)) {
        anyhow::bail!("second-order path difference is not above {SECOND_ORDER_FLOOR:.0e}");
    }
    Ok(())
}
