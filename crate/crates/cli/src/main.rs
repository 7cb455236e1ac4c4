use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use gridtune_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors are configuration errors; help and version are not errors.
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let code = run(cli, &mut std::io::stdout(), &mut std::io::stderr());
    ExitCode::from(code as u8)
}
