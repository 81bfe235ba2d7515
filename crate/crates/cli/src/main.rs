use clap::Parser;
use spectra_cli::commands::{run, Cli};

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("spectra: {e}");
        std::process::exit(e.exit_code());
    }
}
