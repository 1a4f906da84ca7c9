use clap::Parser;
use flora_cli::cli::Cli;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FLORA_LOG", "info")).format_timestamp(None).init();
    let cli = Cli::try_parse().unwrap_or_else(|e| e.exit());
    if let Err(e) = flora_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
