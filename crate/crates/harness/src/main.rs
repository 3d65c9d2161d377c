use clap::Parser;

fn main() {
    let cli = ccsgd_harness::cli::Cli::parse();
    std::process::exit(ccsgd_harness::cli::execute(cli));
}
