mod args;
mod commands;

use std::process::ExitCode;

use belab_core::{Error, ErrorKind};
use clap::Parser;

use args::{Cli, Command};

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numeric => 3,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let seed = cli.seed;
    match cli.command {
        Command::Corpus(c) => commands::corpus(c, seed),
        Command::Tok(c) => commands::tok(c),
        Command::Ingest(c) => commands::ingest(c, seed),
        Command::Encoder(c) => commands::encoder(c, seed),
        Command::Audio(c) => commands::audio(c, seed),
        Command::Fusion(c) => commands::fusion(c, seed),
        Command::Eval(a) => commands::evaluate(a),
        Command::Sweep(a) => commands::sweep(a, seed),
        Command::Pipeline(a) => commands::pipeline(a),
        Command::Fixture(a) => commands::fixture(a, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
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
            let message = e.to_string();
            eprintln!("error: {message}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                let cause = s.to_string();
                if !message.contains(&cause) {
                    eprintln!("  caused by: {cause}");
                }
                source = s.source();
            }
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
