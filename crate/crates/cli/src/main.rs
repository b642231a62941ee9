use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use ostr_cli::{run, summary_line, Cli};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            let name = std::env::args().nth(1).filter(|a| !a.starts_with('-')).unwrap_or_else(|| "-".into());
            let msg = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            println!("{}", summary_line(&name, false, &[("error".into(), msg)]));
            return ExitCode::from(2);
        }
    };
    let name = cli.command.name();
    match run(&cli) {
        Ok(pairs) => {
            println!("{}", summary_line(name, true, &pairs));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            println!("{}", summary_line(name, false, &[("error".into(), format!("{e:#}"))]));
            ExitCode::FAILURE
        }
    }
}
