use clap::Parser;

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    redreflex_service::cli::run(redreflex_service::cli::Cli::parse())
}
