use clap::Parser;

fn main() {
    let cli = keymorph_cli::Cli::parse();
    if let Err(e) = keymorph_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code().into());
    }
}
