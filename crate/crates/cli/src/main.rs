use clap::Parser;

fn main() {
    let cli = neurodecode_cli::Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(f) = neurodecode_cli::run(cli) {
        eprintln!("error: {}", f.message());
        std::process::exit(f.exit_code());
    }
}
