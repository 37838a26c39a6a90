use gradnet::data::{generate_sequence, save_sequence};

use super::{usage, Context};
use crate::args::SynthArgs;

pub fn run(ctx: &Context, a: SynthArgs) -> anyhow::Result<()> {
    let mut suite = ctx.cfg.suite.clone();
    if let Some(s) = ctx.seed {
        suite.seed = s;
    }
    if let Some(n) = a.count {
        suite.sequences = n;
    }
    if suite.sequences == 0 {
        return Err(usage("--count must be at least 1"));
    }
    for scene in suite.scenes()? {
        let seq = generate_sequence(&scene)?;
        let dir = ctx.out.join(&scene.name);
        save_sequence(&seq, &dir)?;
        println!("{}: {} frames", dir.display(), seq.len());
    }
    Ok(())
}
