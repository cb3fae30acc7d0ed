use std::process::ExitCode;

use clap::Parser;

mod args;
mod commands;
mod report;
mod sweep;

use args::{Cli, Command};
use commands::Status;

/// Exit status: 0 success, 1 usage/config/failed checks, 2 solver abort.
fn exit_code(err: &degentaxis_core::Error) -> u8 {
    match err {
        degentaxis_core::Error::Solver(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SIM_LOG", "info"))
        .format_timestamp(None)
        .init();

    let result = match &cli.command {
        Command::Run(a) => commands::run(a, &cli.global),
        Command::Verify(a) => commands::verify(a),
        Command::Rescale(a) => commands::rescale(a),
        Command::Sweep(a) => sweep::sweep(a, &cli.global),
        Command::Report(a) => report::report(a),
    };
    match result {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Failed) => ExitCode::from(1),
        Ok(Status::Aborted) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
