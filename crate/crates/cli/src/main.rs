use std::process::ExitCode;

use clap::Parser;
use mmode_ssl_cli::{execute, Cli, Layout};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = cli.opts.resolve().and_then(|cfg| execute(cli.command, &cfg, &Layout::new(&cli.opts.out)));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
