use std::process::ExitCode;

use clap::Parser;
use synergraph::cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_line());
            ExitCode::FAILURE
        }
    }
}
