use std::process::ExitCode;

use clap::Parser;
use jcra::cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut out = std::io::stdout().lock();
    match run(cli, &mut out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("jcra: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
