//! The `kfg` command line: argument parsing, dispatch and the error/exit
//! code contract. `main` is a thin wrapper around [`run`].

pub mod args;
pub mod commands;
pub mod error;

use std::ffi::OsString;
use std::io::Write;

use clap::Parser;

use args::{Cli, Command};
pub use error::{CliError, Result};

fn dispatch(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Audit(a) => commands::audit(a, out),
        Command::Gradcheck(a) => commands::gradcheck(a, out, err),
        Command::Eval(a) => commands::eval(a, out, err),
        Command::Bench(a) => commands::bench(a, out),
        Command::TrainToy(a) => commands::train_toy_cmd(a, out),
        Command::Augment(a) => commands::augment_cmd(a, out, err),
    }
}

/// Run one invocation and return the process exit code. Failures print a
/// single `error class=<Class> msg=<text>` line to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = write!(out, "{e}");
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            let _ = writeln!(err, "error class=Usage msg={first:?}");
            let _ = write!(err, "{}", e.render());
            return 2;
        }
    };
    match dispatch(&cli, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error class={} msg={:?}", e.class(), e.to_string());
            e.exit_code()
        }
    }
}
