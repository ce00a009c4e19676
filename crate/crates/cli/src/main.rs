use std::process::ExitCode;

use clap::Parser;
use mapgraph_cli::{run, Cli};

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
