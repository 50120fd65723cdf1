use std::process::ExitCode;

use anisoperc_cli::{run, Cli};
use clap::Parser;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok((report, out)) => {
            for line in &report.summary {
                println!("{line}");
            }
            for path in out.written() {
                println!("wrote {}", path.display());
            }
            for line in &report.failures {
                eprintln!("FAIL {line}");
            }
            if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
