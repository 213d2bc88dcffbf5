use clap::error::ErrorKind;
use clap::Parser;

use resectsim::cli::{execute, Cli, EXIT_CONFIG, EXIT_OK};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors are config errors; 2 is reserved for supervisor aborts.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_CONFIG,
            };
            std::process::exit(code);
        }
    };
    std::process::exit(execute(cli));
}
