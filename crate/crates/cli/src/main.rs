use std::process::ExitCode;

use clap::Parser;
use qge_cli::{exit_code, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("qge {}: {err:#}", cli.command.as_str());
            ExitCode::from(exit_code(&err))
        }
    }
}
