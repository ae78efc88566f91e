use clap::Parser;
use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TVTBIP_LOG", "warn")).init();
    let cli = tvtbip::cli::Cli::parse();
    ExitCode::from(tvtbip::cli::run(cli))
}
