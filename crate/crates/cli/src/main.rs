mod args;
mod commands;
mod config;
mod error;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, FromArgMatches};

use args::{Cli, Command};
use error::CliError;

fn run() -> Result<(), CliError> {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return Ok(());
        }
        Err(e) if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            let _ = e.print();
            return Err(CliError::Usage("a subcommand is required".into()));
        }
        Err(e) => {
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return Err(CliError::Usage(first.trim_start_matches("error: ").to_string()));
        }
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| CliError::Usage(e.to_string()))?;
    let (_, sub) = matches.subcommand().expect("subcommand is required");
    match &cli.command {
        Command::Train(c) => commands::train(c, sub),
        Command::Eval(c) => commands::eval(c, sub),
        Command::Bench(c) => commands::bench(c, sub),
        Command::Flops(c) => commands::flops(c, sub),
        Command::Route(c) => commands::route(c, sub),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_line());
            e.exit_code()
        }
    }
}
