//! Command-line harness: single runs, granularity sweeps, the oracle battery
//! and trace analysis.

pub mod args;
pub mod report;
pub mod stats;
pub mod verify;

use std::io::Write;
use std::process::ExitCode;

use args::{Cli, Command};

/// Writes to stdout; a closed pipe is not an error.
pub(crate) fn emit_stdout(text: &str) -> Result<(), String> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.to_string()),
        _ => Ok(()),
    }
}

pub fn main_with(cli: Cli) -> ExitCode {
    let result = match cli.command {
        Command::Run(a) => report::cmd_run(&a),
        Command::Sweep(a) => report::cmd_sweep(&a),
        Command::Verify(a) => verify::cmd_verify(&a),
        Command::TraceStats(a) => stats::cmd_trace_stats(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            ExitCode::FAILURE
        }
    }
}
