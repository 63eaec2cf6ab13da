//! `cgb`: operator entry point binding data generation, training, evaluation,
//! clustering, heatmap rendering, gradient checks and ablation sweeps into
//! reproducible runs.
//!
//! Exit status: 0 success, 1 usage error, 2 runtime failure (with a
//! `cgb-error.txt` diagnostic in the run's output directory). Every run
//! writes a `run_manifest.txt` sufficient to reproduce its outputs
//! bit-exactly. `CGB_THREADS` caps worker threads.

mod commands;

use clap::error::ErrorKind;
use clap::Parser;
use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::init();
    if let Err(msg) = commands::init_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    let cli = match commands::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let mut ctx = commands::RunCtx::default();
    match commands::dispatch(cli.cmd, &mut ctx) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            commands::write_diagnostic(&ctx, &err);
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
    }
}
