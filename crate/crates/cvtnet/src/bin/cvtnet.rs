use clap::Parser;

fn main() {
    let cli = cvtnet::cli::Cli::parse();
    if let Err(err) = cvtnet::cli::run(&cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
