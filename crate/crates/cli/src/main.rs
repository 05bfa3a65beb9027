//! `sgal` command-line tool.

mod args;
mod commands;
mod config;
mod manifest;

use std::process::ExitCode;

use clap::Parser;
use sgal::Error;

use args::{Cli, Command};

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Usage(_) | Error::Config(_) => 2,
        Error::Data(_) | Error::Format(_) => 3,
        Error::Numeric(_) | Error::Training { .. } => 4,
        Error::Shape(_) | Error::State(_) | Error::Io(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sample(a) => commands::sample(a),
        Command::Project(a) => commands::project(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
