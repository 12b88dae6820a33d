use clap::Parser;

fn main() {
    let cli = sbssl::cli::Cli::parse();
    if let Err(e) = sbssl::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
