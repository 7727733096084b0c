//! `metapool` binary: exit 0 on success, 2 on usage or validation problems,
//! 3 on resource limits, 4 on internal numeric failures.

mod args;
mod config;
mod exec;

use clap::Parser;

fn main() {
    let cli = match args::Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // --help and --version land here too; they are not failures.
            let code = if err.use_stderr() { 2 } else { 0 };
            let _ = err.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = exec::run(cli) {
        eprintln!("error: {err}");
        std::process::exit(i32::from(err.exit_code()));
    }
}
