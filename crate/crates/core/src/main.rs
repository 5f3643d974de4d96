use std::process::ExitCode;

use clap::Parser;
use sparse_rationale::cli::{error_line, resolve, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match resolve(&cli).and_then(|cfg| run(cli.command, &cfg)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
