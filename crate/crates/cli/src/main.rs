//! `vvcv`: run the bundled benchmarks or fit control variates to user data.

mod bench_cmd;
mod config;
mod error;
mod fit_cmd;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "vvcv", version, about = "Vector-valued control variates for Monte Carlo integration")]
struct Cli {
    /// Worker threads; 0 picks one per core.
    #[arg(long, global = true, env = "VVCV_THREADS", default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a benchmark problem and write raw and summary CSVs.
    Bench(bench_cmd::BenchArgs),
    /// Fit one method to per-task sample files.
    Fit(fit_cmd::FitArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("warning: could not set the thread count: {e}");
        }
    }
    let result: Result<(), CliError> = match cli.command {
        Command::Bench(a) => bench_cmd::run(a),
        Command::Fit(a) => fit_cmd::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
