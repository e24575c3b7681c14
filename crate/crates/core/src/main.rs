use std::process::ExitCode;

use clap::Parser;
use dsrc_rgb::cli::{run, Args};

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(args) => args,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(&args) {
        Ok(outcome) => {
            eprintln!(
                "done: {} runs executed, {} grid points resumed",
                outcome.executed_runs, outcome.resumed_points
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
