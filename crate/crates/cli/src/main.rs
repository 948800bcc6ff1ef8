use std::process::ExitCode;

use clap::Parser;
use vlkd_cli::{failure_line, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let env_seed = std::env::var("VLKD_SEED").ok();
    match run(&cli, env_seed.as_deref()) {
        Ok(lines) => {
            for line in lines {
                println!("{line}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", failure_line(&e));
            ExitCode::FAILURE
        }
    }
}
