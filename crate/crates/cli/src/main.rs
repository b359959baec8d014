use std::process::ExitCode;

use clap::Parser;
use spindefect_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(m) => {
            eprintln!("{}: wrote {} files", m.command, m.outputs.len() + 1);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
