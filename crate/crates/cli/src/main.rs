use clap::error::ErrorKind;
use clap::Parser;
use mnemcap_cli::args::Cli;

/// Exit codes: 0 success, 1 validation/usage error, 2 I/O or file-format
/// error.
fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                print!("{e}");
                std::process::exit(0);
            }
            _ => {
                eprint!("{e}");
                std::process::exit(1);
            }
        },
    };
    if let Err(e) = mnemcap_cli::run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
