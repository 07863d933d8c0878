use clap::Parser;

fn main() {
    let cli = insp::cli::Cli::parse();
    if let Err(e) = insp::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(insp::cli::exit_code(&e));
    }
}
