use clap::Parser;
use panocorr_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("panocorr: {e}");
        std::process::exit(e.exit_code());
    }
}
