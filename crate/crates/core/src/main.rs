use clap::Parser;

fn main() {
    let cli = eifkit::cli::Cli::parse();
    std::process::exit(eifkit::cli::main_with(cli));
}
