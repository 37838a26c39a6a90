pub mod ablate;
pub mod diag;
pub mod eval;
pub mod gradcheck;
pub mod synth;
pub mod track;
pub mod train;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use gradnet::checkpoint::Checkpoint;
use gradnet::config::Config;
use gradnet::data::{load_sequence, load_sequences, Sequence};
use gradnet::net::NetConfig;

use crate::args::Cli;

/// A problem with the invocation rather than with running it.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Settings shared by every subcommand.
pub struct Context {
    pub cfg: Config,
    pub out: PathBuf,
    pub seed: Option<u64>,
}

impl Context {
    pub fn new(cli: &Cli) -> anyhow::Result<Context> {
        let mut cfg = match &cli.config {
            Some(path) => {
                require(path, "config file")?;
                Config::load(path)?
            }
            None => Config::default(),
        };
        if cli.paper_scale {
            cfg.net = NetConfig::paper();
        }
        if let Some(w) = cli.workers {
            if w == 0 {
                return Err(usage("--workers must be at least 1"));
            }
            cfg.experiment.workers = w;
        }
        Ok(Context {
            cfg,
            out: cli.out.clone(),
            seed: cli.seed,
        })
    }

    pub fn workers(&self) -> usize {
        self.cfg.experiment.workers
    }

    /// Creates the output directory and returns `name` inside it.
    pub fn output(&self, name: &str) -> anyhow::Result<PathBuf> {
        fs::create_dir_all(&self.out).map_err(|e| usage(format!("cannot create {}: {e}", self.out.display())))?;
        Ok(self.out.join(name))
    }
}

pub fn require(path: &Path, what: &str) -> anyhow::Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("{what} not found: {}", path.display())))
    }
}

pub fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    require(path, "checkpoint")?;
    Ok(Checkpoint::load(path)?)
}

/// Sequences under `root`, or the configured synthetic suite.
pub fn sequences(cfg: &Config, root: Option<&Path>) -> anyhow::Result<Vec<Sequence>> {
    match root {
        Some(r) => {
            require(r, "sequence root")?;
            if r.join(gradnet::data::sequence::GROUNDTRUTH_FILE).is_file() {
                return Ok(vec![load_sequence(r)?]);
            }
            let seqs = load_sequences(r)?;
            if seqs.is_empty() {
                return Err(usage(format!("no sequences under {}", r.display())));
            }
            Ok(seqs)
        }
        None => Ok(cfg.suite.generate()?),
    }
}

pub fn write_json(path: &Path, value: serde_json::Value) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(&value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
