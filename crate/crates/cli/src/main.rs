mod args;
mod commands;
mod plot;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use commands::{Context, UsageError};

/// Usage and configuration problems.
const EXIT_USAGE: u8 = 1;
/// Everything that fails after the inputs were accepted.
const EXIT_RUNTIME: u8 = 2;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return EXIT_USAGE;
    }
    match e.downcast_ref::<gradnet::error::Error>() {
        Some(gradnet::error::Error::Config(_)) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let ctx = Context::new(&cli)?;
    match cli.command {
        Command::Train(a) => commands::train::run(&ctx, a),
        Command::Track(a) => commands::track::run(&ctx, a),
        Command::Eval(a) => commands::eval::run(&ctx, a),
        Command::Ablate(a) => commands::ablate::run(&ctx, a),
        Command::Diag(a) => commands::diag::run(&ctx, a),
        Command::Gradcheck(a) => commands::gradcheck::run(&ctx, a),
        Command::Synth(a) => commands::synth::run(&ctx, a),
        Command::Config => {
            print!("{}", ctx.cfg.to_toml_string()?);
            Ok(())
        }
    }
}
