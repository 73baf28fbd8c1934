use std::process::ExitCode;

use clap::Parser;
use ipt_core::cli::{exit_code, run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("IPT_LOG", "error"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = run(&cli);
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    ExitCode::from(exit_code(&result))
}
