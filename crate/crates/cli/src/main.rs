//! `inilora` command-line entrypoint.
//!
//! Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.

mod cli;
mod commands;
mod settings;

use std::ffi::OsString;
use std::fmt;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use cli::{Cli, Command};
use settings::{echo, resolve, Globals};

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<inilora::Error> for CliError {
    fn from(e: inilora::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let globals = Globals {
        seed: cli.seed,
        cache: cli.cache.clone(),
    };
    let config = cli.config.as_deref();
    let out = cli.out.as_path();
    let name = cli.command.name();
    match &cli.command {
        Command::Stats(a) => {
            let s: settings::StatsSettings = resolve(name, config, a, &globals)?;
            echo(out, name, &s)?;
            commands::stats(&s, out)
        }
        Command::Approx(a) => {
            let s: settings::ApproxSettings = resolve(name, config, a, &globals)?;
            echo(out, name, &s)?;
            commands::approx(&s, out)
        }
        Command::Init(a) => {
            let s: settings::InitSettings = resolve(name, config, a, &globals)?;
            echo(out, name, &s)?;
            commands::init(&s, out)
        }
        Command::Train(a) => {
            let s: settings::TrainSettings = resolve(name, config, a, &globals)?;
            echo(out, name, &s)?;
            commands::train(&s, out)
        }
        Command::SweepApprox(a) => {
            let s: settings::SweepApproxSettings = resolve(name, config, a, &globals)?;
            commands::sweep_approx(&s, out).map(drop)
        }
        Command::SweepSigma(a) => {
            let s: settings::SweepSigmaSettings = resolve(name, config, a, &globals)?;
            commands::sweep_sigma_cmd(&s, out).map(drop)
        }
        Command::SweepDist(a) => {
            let s: settings::SweepDistSettings = resolve(name, config, a, &globals)?;
            commands::sweep_dist(&s, out).map(drop)
        }
        Command::Report(a) => {
            let s: settings::ReportSettings = resolve(name, config, a, &globals)?;
            echo(out, name, &s)?;
            commands::report(&s, out)
        }
        Command::MakeToy(a) => {
            let s: settings::MakeToySettings = resolve(name, config, a, &globals)?;
            echo(out, name, &s)?;
            commands::make_toy(&s, out)
        }
    }
}

fn run(argv: impl IntoIterator<Item = OsString>) -> u8 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    ExitCode::from(run(std::env::args_os()))
}
