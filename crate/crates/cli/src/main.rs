//! `prenet` — train, run, and evaluate progressive deraining networks.
//!
//! Progress and diagnostics go to stderr; machine-readable results go to
//! stdout. Exit codes: 0 success, 1 usage, 2 I/O, 3 format/corruption,
//! 4 numerical failure.

mod commands;

use clap::error::ErrorKind;
use clap::Parser;
use prenet_core::Error;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "prenet",
    about = "Progressive image deraining networks (PRN / PReNet)",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: commands::Command,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Contract(_) | Error::UnsupportedKernel(_) => 1,
        Error::Io(_) | Error::Image(_) => 2,
        Error::Shape { .. }
        | Error::Format(_)
        | Error::Corruption(_)
        | Error::UnsupportedFormat(_)
        | Error::Validation(_) => 3,
        Error::NonFinite(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are not usage errors.
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprintln!("{e}");
            return ExitCode::from(1);
        }
    };
    match cli.command.run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
