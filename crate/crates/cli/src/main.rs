use std::process::ExitCode;

use clap::Parser;
use dwad_cli::{execute, exit_code, Cli};

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dwad: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
