use clap::Parser;

fn main() {
    let cli = rode_qctl::Cli::parse();
    std::process::exit(rode_qctl::main_with(cli));
}
