use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_millis()
        .init();
    let cli = passrl::cli::Cli::parse();
    std::process::exit(passrl::cli::run(cli));
}
