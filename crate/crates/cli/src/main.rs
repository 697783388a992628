use clap::Parser;

fn main() {
    let cli = segattn_cli::Cli::parse();
    std::process::exit(segattn_cli::execute(&cli));
}
