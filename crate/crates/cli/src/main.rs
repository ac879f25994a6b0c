use std::process::ExitCode;

use bpurf_cli::commands::{run, Cli};
use bpurf_cli::exit;
use clap::error::ErrorKind;
use clap::Parser;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", exit::record("usage", e.to_string().trim(), exit::USAGE));
            return ExitCode::from(exit::USAGE as u8);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            let (code, rec) = exit::classify(&err);
            eprintln!("{rec}");
            ExitCode::from(code as u8)
        }
    }
}
