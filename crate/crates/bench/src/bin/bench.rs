use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use mosden_bench::{run_bench, summary, write_csv, Scenario};

/// Runs a bench scenario and writes a CSV report.
#[derive(Parser)]
#[command(name = "bench", version)]
struct Args {
    /// Scenario file (JSON).
    #[arg(long)]
    scenario: PathBuf,
    /// Where to write the CSV report.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    mosden_runtime::init_logging();
    let args = Args::parse();
    let scn = match Scenario::load(&args.scenario) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("bench: {e}");
            return ExitCode::from(2);
        }
    };
    let rows = run_bench(&scn);
    if let Err(e) = write_csv(&rows, &args.out) {
        eprintln!("bench: {}: {e}", args.out.display());
        return ExitCode::FAILURE;
    }
    print!("{}", summary(&scn, &rows));
    ExitCode::SUCCESS
}
