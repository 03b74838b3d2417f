use clap::Parser;

fn main() {
    let cli = levy_refract::cli::Cli::parse();
    std::process::exit(levy_refract::cli::main_with(cli));
}
