mod cli;
mod commands;
mod config;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser};

use cli::Cli;
use commands::{Outcome, Usage};
use config::RunConfig;

const EXIT_NOT_DETECTED: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn print_usage_error(subcommand: &str, message: &str) {
    let mut cmd = Cli::command();
    cmd.build();
    let err = match cmd.find_subcommand_mut(subcommand) {
        Some(sub) => sub.error(ErrorKind::ValueValidation, message),
        None => Cli::command().error(ErrorKind::ValueValidation, message),
    };
    let _ = err.print();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let sub = cli.command.name();
    let cfg = match cli.config.as_deref().map(RunConfig::load).transpose() {
        Ok(c) => c.unwrap_or_default(),
        Err(e) => {
            print_usage_error(sub, &format!("--config: {e:#}"));
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match commands::run(cli.command, cfg) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::NotDetected) => ExitCode::from(EXIT_NOT_DETECTED),
        Err(e) => match e.downcast_ref::<Usage>() {
            Some(u) => {
                print_usage_error(u.subcommand, &u.message);
                ExitCode::from(EXIT_USAGE)
            }
            None => {
                eprintln!("error: {e:#}");
                ExitCode::from(EXIT_RUNTIME)
            }
        },
    }
}
