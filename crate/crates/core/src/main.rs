use clap::Parser;

fn main() {
    let args = nrsfm::cli::CliArgs::parse();
    std::process::exit(nrsfm::cli::main_with(args));
}
