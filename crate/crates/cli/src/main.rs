use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use teammoe_cli::{run, Cli};

fn fail(msg: &str) -> ExitCode {
    let line = msg.trim().trim_start_matches("error: ").replace('\n', " ");
    eprintln!("error: {line}");
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        // usage errors carry a hint paragraph; keep only the diagnostic
        Err(e) => return fail(e.to_string().lines().next().unwrap_or("invalid arguments")),
    };
    match run(&cli) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => fail(&format!("{e:#}")),
    }
}
